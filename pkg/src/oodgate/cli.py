"""Command-line entry point: ``oodgate <stage> --config run.json``.

Exit status 0 on success, 1 for an invalid config, 2 when an upstream
artefact is missing, 3 for any other failure. Failures print one JSON line
on stderr: ``{"error": <type>, "exit": <code>, "stage": <stage>, "message": <text>}``.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, RunConfig
from .errors import InvalidSpec, MissingUpstream
from .pipeline import STAGES, run

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would read as a missing artefact
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="oodgate", description="Score, evaluate and gate OOD detectors on a reproducible benchmark.")
    p.add_argument("stage", choices=STAGES + ("all",))
    p.add_argument("--config", help="JSON run configuration (built-in defaults when omitted)")
    p.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
    p.add_argument("--out", help="output root; results go to <out>/<config hash>/")
    p.add_argument("-q", "--quiet", action="store_true", help="no progress lines on stdout")
    return p


def _fail(code: int, exc: BaseException, stage: str | None) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    line = {"error": type(exc).__name__, "exit": code, "stage": stage, "message": msg}
    print(json.dumps(line), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    stage = None
    try:
        args = build_parser().parse_args(argv)
        stage = args.stage
        overrides = {"seed": args.seed, "out": args.out}
        cfg = RunConfig.load(args.config, **overrides) if args.config else RunConfig.from_dict({}, **overrides)
        log = None if args.quiet else print
        if log:
            log(f"run directory {cfg.run_dir}")
        run(stage, cfg, log)
    except InvalidSpec as exc:
        return _fail(EXIT_CONFIG, exc, stage)
    except MissingUpstream as exc:
        return _fail(EXIT_MISSING, exc, stage)
    except Exception as exc:  # noqa: BLE001 - any other failure maps to one exit code
        return _fail(EXIT_RUNTIME, exc, stage)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
