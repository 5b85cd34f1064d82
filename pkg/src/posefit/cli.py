"""``posefit`` command line: a thin client over the service handlers.

By default commands run in-process; ``--server URL`` sends the same request
body to a running ``posefit serve`` instead. Failures print one JSON line to
stderr (``{"error": kind, "message": ..., "exit_code": n}``) and exit with

    0 ok, 2 configuration error, 3 data error,
    4 solver-flagged frames above ``track.max_flagged_fraction``.
"""
from __future__ import annotations

import argparse
import json
import sys
from typing import Callable

from pydantic import BaseModel, ValidationError

from . import __version__
from .errors import ConfigError, PosefitError
from .service import handlers
from .service import schemas as S

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_FLAGGED = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("config", message, EXIT_CONFIG)


def _fail(kind: str, message: str, code: int):
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    raise SystemExit(code)


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", dest="config_path", help="YAML/JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, repeatable (e.g. fit.w_proj=40)")


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gt-2d-lookup", action="store_true", help="read 3D at ground-truth 2D locations")
    p.add_argument("--no-ik", action="store_true", help="drop the 3D similarity term from fitting")
    p.add_argument("--no-filter", action="store_true", help="disable all three 1-Euro stages")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="posefit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"posefit {__version__}")
    parser.add_argument("--server", help="base URL of a running posefit service")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render a synthetic sequence to disk")
    g.add_argument("--out", required=True, help="sequence directory to create")
    g.add_argument("--seed", type=int, help="seed for motion and noise (default 0)")
    g.add_argument("--frames", type=int, help="frame count (default 300)")
    g.add_argument("--fov-deg", type=float, help="vertical field of view (default 54)")
    g.add_argument("--skeleton", dest="skeleton_path", help="skeleton JSON (default: built-in 21 joints)")
    g.add_argument("--motion", dest="motion_path", help="motion spec YAML/JSON")
    g.add_argument("--noise", dest="noise_path", help="noise spec YAML/JSON")
    _config_args(g)

    t = sub.add_parser("track", help="run the full pipeline over a sequence")
    t.add_argument("sequence", help="sequence directory from `generate`")
    t.add_argument("--out", help="output directory (default: SEQUENCE/track)")
    t.add_argument("--fov-deg", type=float, help="override the sequence camera's vertical FOV")
    t.add_argument("--skeleton", dest="skeleton_path", help="skeleton template JSON")
    _pipeline_flags(t)
    _config_args(t)

    e = sub.add_parser("eval", help="score predicted poses against ground truth")
    e.add_argument("pred", help="poses.jsonl or a track output directory")
    e.add_argument("gt", help="frames.jsonl, poses.jsonl or a sequence directory")
    e.add_argument("--out", help="write the JSON report here")
    e.add_argument("--csv", help="write per-frame, per-joint errors here")
    e.add_argument("--warmup", dest="warmup_frames", type=int, default=0, help="skip leading frames")
    e.add_argument("--joints", choices=("eval14", "all"), default="eval14")
    e.add_argument("--skeleton", dest="skeleton_path", help="skeleton JSON naming the joints")

    b = sub.add_parser("bench", help="per-stage timing percentiles")
    b.add_argument("sequence", nargs="?", help="sequence directory (default: synthesize in memory)")
    b.add_argument("--out", help="write the JSON timing report here")
    b.add_argument("--frames", type=int, default=300)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--fov-deg", type=float, help="vertical field of view (default 54)")
    b.add_argument("--jacobian", dest="jacobians", action="append", choices=("analytic", "numeric"),
                   help="repeatable; default both")
    _config_args(b)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    return parser


_COMMANDS: dict[str, tuple[type[BaseModel], Callable, str]] = {
    "generate": (S.GenerateRequest, handlers.generate, "/generate"),
    "track": (S.TrackRequest, handlers.track, "/track"),
    "eval": (S.EvalRequest, handlers.evaluate_files, "/eval"),
    "bench": (S.BenchRequest, handlers.bench, "/bench"),
}


def _request(model: type[BaseModel], args: argparse.Namespace) -> BaseModel:
    fields = {k: v for k, v in vars(args).items() if k in model.model_fields and v is not None}
    try:
        return model(**fields)
    except ValidationError as exc:
        raise ConfigError(f"invalid arguments: {exc.errors(include_url=False)}") from exc


def _remote(base_url: str, path: str, req: BaseModel) -> dict:
    import httpx

    try:
        resp = httpx.post(base_url.rstrip("/") + path, json=req.model_dump(), timeout=None)
    except httpx.HTTPError as exc:
        _fail("connection", f"cannot reach {base_url}: {exc}", EXIT_DATA)
    if resp.status_code >= 400:
        try:
            err = S.ErrorBody.model_validate(resp.json())
        except ValueError:
            _fail("server", f"HTTP {resp.status_code}: {resp.text[:200]}", EXIT_DATA)
        _fail(err.error, err.message, err.exit_code)
    return resp.json()


def _serve(args) -> int:
    import uvicorn

    uvicorn.run("posefit.service.app:app", host=args.host, port=args.port)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        return _serve(args)
    model, handler, path = _COMMANDS[args.command]
    try:
        req = _request(model, args)
        if args.server:
            result = _remote(args.server, path, req)
        else:
            result = handler(req).model_dump()
    except PosefitError as exc:
        _fail(exc.kind, str(exc), exc.exit_code)
    except Exception as exc:  # noqa: BLE001 - still owe the caller a parsable line
        _fail("internal", f"{type(exc).__name__}: {exc}", 1)
    print(json.dumps(result, indent=2, sort_keys=True))
    if args.command == "track" and result["flagged_fraction"] > result["max_flagged_fraction"]:
        _fail("solver_flagged",
              f"{result['flagged_frames']} of {result['frames']} frames flagged by the solver "
              f"(limit {result['max_flagged_fraction']:.0%})", EXIT_FLAGGED)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
