"""Command line entry points.

Subcommands:

* ``gen-dataset`` — write the layout+prompt dataset for a seed.
* ``apply``       — run one serialized attention-control request from a file
                    and write the response next to it.
* ``simulate``    — sample the bundled toy diffusion model under a control
                    method, optionally dumping a per-call attention trace.
* ``eval``        — score generated images against their layouts and print
                    the MEAN ± STD (BEST) report.
* ``serve``       — answer framed control requests over stdio or a unix
                    socket until the peer hangs up.

A ``--config FILE`` of ``key=value`` lines supplies defaults for any of the
hyperparameter flags (explicit flags win).  Exit codes: 0 success, 2 usage,
3 data error, 4 protocol error.
"""

from __future__ import annotations

import argparse
import shlex
import socket as socket_mod
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import wire
from .control import METHODS, ControlConfig
from .errors import AttnCtlError, ProviderFailure, WireError
from .metrics import (
    StubEmbeddingProvider,
    WireEmbeddingProvider,
    evaluate_dataset,
    format_report,
)
from .microdiff import (
    Microdiff,
    MicrodiffConfig,
    conditioning_from_annotated,
    write_trace_jsonl,
)
from .rng import SplitMix64
from .simplescenes import (
    DEFAULT_COUNTS,
    builtin_layout,
    generate,
    instantiate,
    template_by_name,
    write_dataset,
)


class UsageError(Exception):
    pass


def load_config(path) -> dict:
    """key=value lines; blank lines and #-comments are ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _setting(args, config, name, cast, default):
    """Flag if given, else config-file entry, else the default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    if name in config:
        try:
            return cast(config[name])
        except ValueError as err:
            raise UsageError(f"config key {name}: {err}") from err
    return default


def _control_config(args, config) -> ControlConfig:
    return ControlConfig(
        method=_setting(args, config, "method", str, "none"),
        w_prime=_setting(args, config, "w_prime", float, 0.5),
        w_m=_setting(args, config, "w_m", float, 0.0),
        w_a=_setting(args, config, "w_a", float, 0.0),
        t_thr=_setting(args, config, "t_thr", int, None),
        softness=_setting(args, config, "softness", float, 0.8),
    )


def _seed(args, config, default=0) -> int:
    return _setting(args, config, "seed", int, default)


# --- subcommands -----------------------------------------------------------

def cmd_gen_dataset(args, config) -> int:
    seed = _seed(args, config)
    counts = DEFAULT_COUNTS
    raw_counts = _setting(args, config, "counts", str, None)
    if raw_counts is not None:
        counts = tuple(int(v) for v in raw_counts.split(","))
    examples = generate(seed=seed, counts=counts)
    write_dataset(examples, args.out)
    per_template: dict = {}
    for ex in examples:
        per_template[ex.template] = per_template.get(ex.template, 0) + 1
    for name, n in per_template.items():
        print(f"{name}: {n}")
    print(f"total: {len(examples)} examples under {args.out} (seed {seed})")
    return 0


def cmd_apply(args, config) -> int:
    req = wire.decode_request(Path(args.infile).read_bytes())
    overrides = {}
    for name in ("w_prime", "w_m", "w_a", "t_thr", "softness"):
        value = _setting(args, config, name, float, None)
        if value is not None:
            overrides[name] = value
    method = _setting(args, config, "method", str, None)
    if method is not None:
        if method not in METHODS:
            raise UsageError(f"unknown method {method!r}; known: {', '.join(METHODS)}")
        overrides["method"] = METHODS.index(method)
    if "t_thr" in overrides:
        overrides["t_thr"] = int(overrides["t_thr"])
    if overrides:
        req = wire.WireRequest(**{**req.__dict__, **overrides})
    resp = wire.handle_request(req)
    Path(args.out).write_bytes(wire.encode_response(resp))
    print(f"method={METHODS[req.method]} heads={resp.heads} pixels={resp.hw} "
          f"tokens={resp.n_tokens} no_local={resp.no_local} "
          f"no_global={resp.no_global} -> {args.out}")
    return 0


def cmd_simulate(args, config) -> int:
    seed = _seed(args, config)
    if args.prompt is not None:
        if args.layout is None:
            raise UsageError("--prompt needs --layout NAME")
        spec = builtin_layout(args.layout)
        raw = args.prompt
    else:
        template = template_by_name(args.template)
        spec = builtin_layout(template.layout_name)
        raw = instantiate(template, SplitMix64(seed))
    layout = spec.rasterize()
    text_emb, alignment = conditioning_from_annotated(raw, layout)

    control = _control_config(args, config)
    steps = _setting(args, config, "steps", int, 50)
    gate = _setting(args, config, "gate", float, 0.0)
    model = Microdiff(replace(MicrodiffConfig(), steps=steps, gate=gate))
    trace: list | None = [] if args.trace else None
    latent = model.sample(text_emb, layout, alignment, control,
                          seed=seed, use_hint=not args.no_hint, trace=trace)
    if args.out:
        np.save(args.out, latent)
    if args.trace:
        write_trace_jsonl(trace, args.trace)
        print(f"trace: {len(trace)} attention calls -> {args.trace}")
    print(f"prompt: {raw}")
    print(f"latent {latent.shape} in [{latent.min():+.4f}, {latent.max():+.4f}] "
          f"after {steps} steps, method={control.method}, gate={gate}")
    return 0


def _wire_provider(args, config):
    command = _setting(args, config, "provider_cmd", str, None)
    if not command:
        raise UsageError("--provider wire needs --provider-cmd COMMAND")
    proc = subprocess.Popen(shlex.split(command), stdin=subprocess.PIPE,
                            stdout=subprocess.PIPE)
    return WireEmbeddingProvider(proc.stdin, proc.stdout), proc


def cmd_eval(args, config) -> int:
    provider_kind = _setting(args, config, "provider", str, "stub")
    proc = None
    if provider_kind == "stub":
        provider = StubEmbeddingProvider(dim=_setting(args, config, "dim", int, 32))
    elif provider_kind == "wire":
        provider, proc = _wire_provider(args, config)
    else:
        raise UsageError(f"unknown provider {provider_kind!r} (stub or wire)")
    try:
        tables, keys, seeds = evaluate_dataset(
            args.dataset, args.images, provider,
            mask_background=bool(_setting(args, config, "mask_background",
                                          _parse_bool, False)),
        )
    finally:
        if proc is not None:
            proc.stdin.close()
            proc.wait(timeout=10)
    print(f"{len(keys)} examples x {len(seeds)} seeds (seeds: "
          f"{', '.join(map(str, seeds))})")
    print(format_report(tables.values(),
                        sample_std=bool(_setting(args, config, "sample_std",
                                                 _parse_bool, False))))
    return 0


def cmd_serve(args, config) -> int:
    if args.socket is None:
        wire.serve(sys.stdin.buffer, sys.stdout.buffer)
        return 0
    server = socket_mod.socket(socket_mod.AF_UNIX)
    try:
        server.bind(args.socket)
        server.listen(1)
        while True:
            conn, _ = server.accept()
            with conn:
                wire.serve(conn.makefile("rb"), conn.makefile("wb"))
            if args.once:
                return 0
    except KeyboardInterrupt:
        return 0
    finally:
        server.close()
        Path(args.socket).unlink(missing_ok=True)


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnctl",
        description="Layout-conditioned cross-attention control toolbox.")
    parser.add_argument("--config", metavar="FILE",
                        help="key=value defaults for hyperparameter flags")
    parser.add_argument("--seed", type=int, default=None,
                        help="seed for anything stochastic (default 0)")
    # the same two flags are accepted after the subcommand as well; SUPPRESS
    # keeps an absent subcommand flag from clobbering the global one
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="write the benchmark dataset",
                       parents=[common])
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--counts", default=None,
                   help="comma-separated per-template sizes (default "
                        + ",".join(map(str, DEFAULT_COUNTS)) + ")")
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("apply", parents=[common], help="answer one serialized control request")
    p.add_argument("--in", dest="infile", required=True,
                   help="file holding a single request frame payload")
    p.add_argument("--out", required=True, help="file for the response payload")
    _add_control_flags(p)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("simulate", parents=[common], help="run the toy diffusion sampler")
    p.add_argument("--template", default="rabbit_mage",
                   help="scene template to instantiate (default rabbit_mage)")
    p.add_argument("--prompt", default=None,
                   help="explicit annotated prompt (needs --layout)")
    p.add_argument("--layout", default=None, help="built-in layout name")
    p.add_argument("--steps", type=int, default=None,
                   help="sampler steps, must divide 1000 (default 50)")
    p.add_argument("--gate", type=float, default=None,
                   help="control-branch injection strength (default 0)")
    p.add_argument("--no-hint", action="store_true",
                   help="drop the layout hint (disables the control branch)")
    p.add_argument("--out", default=None, help="write the final latent (.npy)")
    p.add_argument("--trace", default=None,
                   help="write per-call attention records (.jsonl)")
    _add_control_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", parents=[common], help="score images against their layouts")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--images", required=True,
                   help="image tree: <template>/<index>/<seed>.ppm")
    p.add_argument("--provider", default=None, choices=("stub", "wire"),
                   help="embedding source (default stub)")
    p.add_argument("--provider-cmd", dest="provider_cmd", default=None,
                   help="command serving embeddings over stdio (wire provider)")
    p.add_argument("--dim", type=int, default=None,
                   help="stub embedding dimension (default 32)")
    p.add_argument("--mask-background", dest="mask_background",
                   action="store_const", const=True, default=None,
                   help="zero pixels outside the mask inside each crop")
    p.add_argument("--sample-std", dest="sample_std",
                   action="store_const", const=True, default=None,
                   help="report sample instead of population std")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", parents=[common], help="answer framed requests until EOF")
    p.add_argument("--socket", default=None,
                   help="serve on a unix socket path instead of stdio")
    p.add_argument("--once", action="store_true",
                   help="with --socket: exit after the first connection")
    p.set_defaults(func=cmd_serve)
    return parser


def _add_control_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", default=None, choices=METHODS,
                   help="control method (default none)")
    p.add_argument("--w-prime", dest="w_prime", type=float, default=None,
                   help="strength of the additive-bias methods (default 0.5)")
    p.add_argument("--w-m", dest="w_m", type=float, default=None,
                   help="multiplicative mixing boost (default 0)")
    p.add_argument("--w-a", dest="w_a", type=float, default=None,
                   help="additive mixing boost (default 0)")
    p.add_argument("--t-thr", dest="t_thr", type=int, default=None,
                   help="boost ramp midpoint step (default: total steps)")
    p.add_argument("--softness", type=float, default=None,
                   help="boost ramp width fraction (default 0.8)")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config) if args.config else {}
        return args.func(args, config)
    except UsageError as err:
        print(f"attnctl: {err}", file=sys.stderr)
        return 2
    except (WireError, ProviderFailure) as err:
        print(f"attnctl: {type(err).__name__}: {err}", file=sys.stderr)
        return 4
    except AttnCtlError as err:
        print(f"attnctl: {type(err).__name__}: {err}", file=sys.stderr)
        return 3
    except OSError as err:
        print(f"attnctl: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
