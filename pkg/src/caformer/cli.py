"""Operator entry point.

Subcommands:
  forward    seeded synthetic run, writes box + diagnostics + manifest
  gradcheck  finite-difference verification of analytic gradients
  profile    analytic cost report, optionally cross-checked against the
             instrumented counter (desk scale)

Exit codes: 0 success, 1 check failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path


from . import elimination, profiler
from .errors import CaformerError, ConfigError
from .gradcheck import TOLERANCE, run_gradcheck
from .numerics import TokenMatrix
from .pipeline import TrackerConfig, forward, init_params
from .synth import synth_frame
from .tensorio import save_catm


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_config(path: str | None) -> TrackerConfig:
    if path is None:
        return TrackerConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    return TrackerConfig.from_json(p.read_text())


def cmd_forward(args) -> int:
    cfg = _load_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    params = init_params(cfg, args.seed)
    templates, searches = synth_frame(args.seed, cfg)
    bbox, diag = forward(cfg, params, templates, searches)

    (out_dir / "bbox.txt").write_text(f"{bbox.cx} {bbox.cy} {bbox.w} {bbox.h}\n")
    (out_dir / "config.json").write_text(cfg.to_json() + "\n")

    lines = [json.dumps({"layer": i + 1, "branch_maxdiff": d})
             for i, d in enumerate(diag.branch_maxdiff)]
    lines.append(json.dumps({"keepsets": [list(ks.kept_positions) for ks in diag.keepsets]}))
    lines.append(json.dumps({"bbox": [bbox.cx, bbox.cy, bbox.w, bbox.h]}))
    (out_dir / "diagnostics.jsonl").write_text("\n".join(lines) + "\n")

    if diag.keepsets:
        (out_dir / "keepsets.txt").write_text(elimination.chain_to_text(diag.keepsets))
    gx = cfg.search_grid
    save_catm(out_dir / "score.catm", TokenMatrix(diag.maps.score))
    save_catm(out_dir / "offset.catm", TokenMatrix(diag.maps.offset.reshape(gx, 2 * gx)))
    save_catm(out_dir / "size.catm", TokenMatrix(diag.maps.size.reshape(gx, 2 * gx)))

    artifacts = {p.name: _sha256(p) for p in sorted(out_dir.iterdir())
                 if p.name != "manifest.json"}
    manifest = {
        "command": "forward",
        "config": args.config or "<default>",
        "seed": args.seed,
        "threads": int(os.environ.get("CAFORMER_THREADS", "1")),
        "artifacts": artifacts,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"bbox: {bbox.cx:.6f} {bbox.cy:.6f} {bbox.w:.6f} {bbox.h:.6f}")
    print(f"wrote {len(artifacts)} artifacts to {out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    corrupt = os.environ.get("CAFORMER_GRADCHECK_CORRUPT") or None
    errors = run_gradcheck(args.scope, seed=args.seed, corrupt=corrupt)
    worst_name, worst = max(errors.items(), key=lambda kv: kv[1])
    for name in sorted(errors):
        print(f"{name}: max rel err {errors[name]:.3e}")
    failing = {n: e for n, e in errors.items() if not e < TOLERANCE}
    if failing:
        for name, err in sorted(failing.items()):
            print(f"FAIL {name}: rel err {err:.3e} >= {TOLERANCE:.0e}", file=sys.stderr)
        return 1
    print(f"gradcheck {args.scope}: {len(errors)} tensors ok "
          f"(worst {worst_name} at {worst:.3e})")
    return 0


def cmd_profile(args) -> int:
    if args.scale == "paper":
        cfg = TrackerConfig.paper(cte=args.cte)
        report = profiler.estimate(cfg)
        print(report.to_json(giga=args.giga))
        total_g = report.total_macs / 1e9
        target = profiler.REFERENCE_CTE_G if args.cte else profiler.REFERENCE_TOTAL_G
        print(f"backbone total: {profiler.format_giga(report.total_macs)} G "
              f"(reference {target} G)")
        return 0

    cfg = TrackerConfig()
    if args.cte:
        cfg = TrackerConfig(cte_layers=frozenset({4, 7, 10}))
    est = profiler.estimate(cfg)
    params = init_params(cfg, args.seed)
    templates, searches = synth_frame(args.seed, cfg)
    meas = profiler.measure(cfg, params, templates, searches)
    print(est.to_json(giga=args.giga))
    for e, m in zip(est.per_layer, meas.per_layer):
        if (e.attention_macs, e.mlp_macs, e.cme_macs) != (m.attention_macs, m.mlp_macs, m.cme_macs):
            print(f"FAIL layer {e.layer}: estimate {e} != measured {m}", file=sys.stderr)
            return 1
    print(f"desk scale: measured == estimated on all {len(est.per_layer)} layers "
          f"({est.total_macs} backbone MACs)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caformer")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fwd = sub.add_parser("forward", help="run a seeded synthetic forward pass")
    p_fwd.add_argument("--config", default=None, help="JSON config path")
    p_fwd.add_argument("--seed", type=int, default=0)
    p_fwd.add_argument("--out", default="out", help="output directory")
    p_fwd.set_defaults(fn=cmd_forward)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p_gc.add_argument("--scope", choices=("cme", "block", "all"), default="all")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.set_defaults(fn=cmd_gradcheck)

    p_prof = sub.add_parser("profile", help="analytic MAC cost report")
    p_prof.add_argument("--scale", choices=("desk", "paper"), default="desk")
    p_prof.add_argument("--cte", action="store_true", help="apply the elimination schedule")
    p_prof.add_argument("--giga", action="store_true", help="report totals in G with 2 decimals")
    p_prof.add_argument("--seed", type=int, default=0)
    p_prof.set_defaults(fn=cmd_profile)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except CaformerError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
