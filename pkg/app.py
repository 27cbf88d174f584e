import os
from dotenv import load_dotenv
load_dotenv()
import logging
import threading

from flask import Flask, jsonify, request
from flask_cors import CORS

from core.acdc_solver import power_balance, solution_to_dict, solve_acdc_sequential
from core.config import C
from core.errors import INPUT_ERRORS, SOLVE_ERRORS, AcdcError
from core.evaluator import infer_multi
from core.models import ControlMode
from core.trainer import load_bank
from parsers.bundled import BundledCaseParser
from parsers.detector import load_case

# ── Logging ───────────────────────────────────────────────
logging.basicConfig(level=getattr(logging, C.LOG_LEVEL, logging.INFO), format=C.LOG_FORMAT)
logger = logging.getLogger(__name__)

# ── App setup ─────────────────────────────────────────────
app = Flask(__name__)
CORS(app, resources={r"/api/*": {"origins": "*"}})

# ── Model bank cache (loaded once per worker) ─────────────
_BANK_CACHE: dict = {}
_BANK_LOCK = threading.Lock()
_BUNDLED   = BundledCaseParser()


def _get_bank(path: str):
    mtime = os.path.getmtime(path) if os.path.isfile(path) else None
    with _BANK_LOCK:
        hit = _BANK_CACHE.get(path)
        if hit is not None and hit[0] == mtime:
            return hit[1]
    bank = load_bank(path)
    with _BANK_LOCK:
        _BANK_CACHE[path] = (mtime, bank)
    logger.info(f"[app] model bank loaded from {path}: {[m.value for m in bank.modes()]}")
    return bank


def _error(e: AcdcError, status: int):
    return jsonify({'error': str(e), 'kind': type(e).__name__}), status


@app.errorhandler(AcdcError)
def handle_acdc_error(e):
    if isinstance(e, INPUT_ERRORS):
        return _error(e, 400)
    if isinstance(e, SOLVE_ERRORS):
        return _error(e, 422)
    logger.exception("[app] unhandled domain error")
    return _error(e, 500)


def _case_from_request():
    payload = request.get_json(silent=True)
    if not isinstance(payload, dict):
        return None, (jsonify({'error': 'request body must be a JSON object', 'kind': 'ParseError'}), 400)
    source = payload.get('case', payload)
    if isinstance(source, str) and source not in _BUNDLED.available():
        return None, (jsonify({'error': f'unknown bundled case {source!r}', 'kind': 'NotFound'}), 400)
    return load_case(source), None


# ═══════════════════════════════════════════════════════════
#  ROUTES
# ═══════════════════════════════════════════════════════════

@app.route('/healthz')
def healthz():
    return jsonify({'status': 'ok', 'bank': os.path.isfile(C.BANK_PATH)})


@app.route('/api/solve', methods=['POST'])
def api_solve():
    case, err = _case_from_request()
    if err:
        return err
    mode = request.args.get('mode')
    try:
        mode = ControlMode(mode) if mode else None
    except ValueError:
        return jsonify({'error': f'unknown mode {mode!r}', 'kind': 'ValidationError'}), 400
    sol = solve_acdc_sequential(case, mode=mode)
    body = solution_to_dict(sol, case)
    body['power_balance'] = power_balance(case, sol)
    return jsonify(body)


@app.route('/api/infer', methods=['POST'])
def api_infer():
    case, err = _case_from_request()
    if err:
        return err
    bank = _get_bank(os.environ.get('ACDC_BANK_PATH', C.BANK_PATH))
    result = infer_multi(bank, case, policy=request.args.get('policy', 'residual'))
    body = solution_to_dict(result.solution.to_solution(), case)
    body.update({
        'chosen_mode':    result.mode.value,
        'infeasible_all': result.infeasible_all,
        'violations':     {m.value: v for m, v in result.violations.items()},
        'residual_l1':    {m.value: r for m, r in result.residual_l1.items()},
    })
    return jsonify(body)


if __name__ == '__main__':
    app.run(debug=False, port=int(os.environ.get('PORT', 5000)))
