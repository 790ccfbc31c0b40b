"""Command-line front end.

Each subcommand posts one request to the service app. By default the app
is mounted in-process, so no server needs to run; pass --server URL to
talk to a remote instance instead. Exit codes: 0 success, 1 bad usage,
2 data or model failure.
"""

from __future__ import annotations

import argparse
import sys


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this tool reserves 2 for data faults."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="ernet", description=__doc__)
    parser.add_argument("--server", default=None,
                        help="base URL of a running service (default: in-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic labeled image tree")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", default="64x64", help="HxW, e.g. 240x240")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a variant on a dataset tree")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="ernet")
    p.add_argument("--input", default="240x240x3", help="HxWxC")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr0", type=float, default=0.001)
    p.add_argument("--decay", type=float, default=0.95)
    p.add_argument("--decay-every", type=int, default=5)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--early-stop", type=float, default=None,
                   help="stop once validation average accuracy reaches this")

    p = sub.add_parser("eval", help="score a saved model on the test split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--format", choices=("table", "kv"), default="table")

    p = sub.add_parser("bench", help="compare forward latency across models")
    p.add_argument("--models", nargs="+", required=True,
                   help="variant names (fresh weights) or saved model files")
    p.add_argument("--input", default="240x240x3")
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--baseline", default="basenet")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("cam", help="write Grad-CAM overlays for images")
    p.add_argument("--model", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.35)
    p.add_argument("--target", type=int, default=None)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def _client(server):
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        # the bundled test client warns about its http backend; not actionable here
        warnings.simplefilter("ignore", UserWarning)
        from starlette.testclient import TestClient

        from .service import app

        return TestClient(app, raise_server_exceptions=False)


def _fail_message(response) -> str:
    try:
        body = response.json()
    except ValueError:
        return response.text.strip() or f"HTTP {response.status_code}"
    if isinstance(body, dict):
        if "error" in body:
            return str(body["error"])
        if "detail" in body:
            return str(body["detail"])
    return str(body)


_REQUESTS = {
    "synth": lambda a: ("/synth", {
        "out": a.out, "classes": a.classes, "per_class": a.per_class,
        "size": a.size, "seed": a.seed,
    }),
    "train": lambda a: ("/train", {
        "data": a.data, "out": a.out, "variant": a.variant, "input": a.input,
        "epochs": a.epochs, "iters": a.iters, "batch": a.batch, "lr0": a.lr0,
        "decay": a.decay, "decay_every": a.decay_every, "l2": a.l2,
        "seed": a.seed, "early_stop": a.early_stop,
    }),
    "eval": lambda a: ("/eval", {
        "model": a.model, "data": a.data, "seed": a.seed, "batch": a.batch,
    }),
    "bench": lambda a: ("/bench", {
        "models": a.models, "input": a.input, "warmup": a.warmup,
        "runs": a.runs, "baseline": a.baseline, "seed": a.seed,
    }),
    "cam": lambda a: ("/cam", {
        "model": a.model, "images": a.images, "out": a.out,
        "alpha": a.alpha, "target": a.target,
    }),
}


def _render(command, args, body) -> str:
    if command == "synth":
        return (f"wrote {body['files']} images under {body['root']} "
                f"({len(body['class_names'])} classes x {body['per_class']})")
    if command == "train":
        lines = [body["table"].rstrip()]
        lines.append(f"model: {body['model_path']}")
        lines.append(f"history: {body['history_path']}")
        if body.get("best_val_acc") is not None:
            lines.append(f"best epoch {body['best_epoch']} "
                         f"val_avg_acc {body['best_val_acc']:.4f}")
        return "\n".join(lines)
    if command == "eval":
        if args.format == "kv":
            return body["kv"].rstrip()
        return body["table"].rstrip()
    if command == "bench":
        machine = body["machine"]
        lines = [body["table"].rstrip()]
        lines.append(f"machine: {machine.get('platform', '?')} "
                     f"python {machine.get('python', '?')} "
                     f"numpy {machine.get('numpy', '?')}")
        return "\n".join(lines)
    if command == "cam":
        lines = []
        for item in body["outputs"]:
            lines.append(f"{item['image']} -> {item['overlay']} "
                         f"(predicted class {item['predicted_class']}, "
                         f"target {item['target_class']})")
        return "\n".join(lines)
    return str(body)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    if args.command == "serve":
        try:
            import uvicorn
        except ImportError:
            print("serve requires uvicorn (pip install ernet[serve])", file=sys.stderr)
            return 2
        from .service import app

        uvicorn.run(app, host=args.host, port=args.port)
        return 0

    path, payload = _REQUESTS[args.command](args)
    client = _client(args.server)
    try:
        response = client.post(path, json=payload)
    except Exception as exc:  # connection-level failure against --server
        print(f"request failed: {exc}", file=sys.stderr)
        return 2
    finally:
        client.close()

    if response.status_code == 200:
        print(_render(args.command, args, response.json()))
        return 0
    print(f"error: {_fail_message(response)}", file=sys.stderr)
    if response.status_code in (400, 422):
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
