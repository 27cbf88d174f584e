import os

bind = "0.0.0.0:8080"
workers = int(os.environ.get("WEB_CONCURRENCY", 2))
timeout = 120
# the model bank and spectral bases are cached per worker
preload_app = False
