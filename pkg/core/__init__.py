# core package