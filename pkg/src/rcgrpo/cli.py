"""Command-line entry point: ``rcgrpo {rollout,train,compare,variance-lab,acd-diag}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import ConfigError, ExperimentConfig
from .experiments import (METRIC_COLUMNS, compare_schemes, csv_text, fmt, rollout_report,
                          run_acd_diag, run_training, run_variance_lab)
from .flow import model_from_json
from .grpo import TrainingError

log = logging.getLogger("rcgrpo")


def _load_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return cfg.replace(seed=args.seed, out_dir=args.out, scheme=args.scheme)


def _out(cfg):
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _model(args):
    if getattr(args, "checkpoint", None):
        return model_from_json(Path(args.checkpoint).read_text())
    return None


def _dump_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


def cmd_rollout(args):
    cfg = _load_config(args)
    out = _out(cfg)
    cands, traj, acd_rows = rollout_report(cfg, model=_model(args), task_index=args.task)
    (out / "candidates.csv").write_text(csv_text(
        ["candidate", "reference", "r_edit", "r_pres", "r_task", "r_acd", "bg_drift"], cands))
    (out / "acd.csv").write_text(csv_text(["candidate", "layer", "step", "acd"], acd_rows))
    _dump_json(out / "trajectory.json", traj)
    print(f"wrote {len(cands)} candidate rows to {out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    if args.updates is not None:
        cfg = cfg.replace(n_updates=args.updates)
    out = _out(cfg)
    metrics = open(out / "metrics.csv", "w")
    metrics.write(",".join(METRIC_COLUMNS) + "\n")
    metrics.flush()

    def on_rows(rows):
        for r in rows:
            metrics.write(",".join(fmt(r[c]) for c in METRIC_COLUMNS) + "\n")
        metrics.flush()

    t0 = time.perf_counter()
    try:
        run = run_training(cfg, model=_model(args), on_rows=on_rows)
    except TrainingError as err:
        metrics.close()
        _dump_json(out / "failure.json", {"error": str(err), "dump": err.dump})
        print(f"training aborted: {err}", file=sys.stderr)
        return 2
    metrics.close()
    (out / "checkpoint.json").write_text(run.model.to_json() + "\n")
    _dump_json(out / "summary.json", {
        "scheme": cfg.scheme, "n_updates": cfg.n_updates,
        "eval_before": run.eval_before, "eval_after": run.eval_after,
    })
    log.info("trained %d updates in %.1fs", cfg.n_updates, time.perf_counter() - t0)
    print(f"eval combined reward {run.eval_before['combined']:.4f} -> {run.eval_after['combined']:.4f}")
    return 0


def cmd_compare(args):
    cfg = _load_config(args)
    out = _out(cfg)
    res = compare_schemes(cfg, n_groups=args.groups)
    rows = []
    for kind, r in res.items():
        for g, (s, d) in enumerate(zip(r["reward_std"], r["bg_drift"])):
            rows.append({"scheme": kind, "group": g, "reward_std": s, "bg_drift": d})
    (out / "compare.csv").write_text(csv_text(["scheme", "group", "reward_std", "bg_drift"], rows))
    summary = {k: {kk: vv for kk, vv in v.items() if kk not in ("reward_std", "bg_drift")}
               for k, v in res.items()}
    _dump_json(out / "compare_summary.json", summary)
    for kind, s in summary.items():
        print(f"{kind}: median reward std {s['median_reward_std']:.6g}, "
              f"median bg drift {s['median_bg_drift']:.6g}")
    return 0


def cmd_variance_lab(args):
    cfg = _load_config(args)
    if args.preset:
        cfg = cfg.replace(lab_preset=args.preset)
    if args.samples:
        cfg = cfg.replace(lab_samples=args.samples)
    out = _out(cfg)
    rep, checks = run_variance_lab(cfg)
    _dump_json(out / "variance_report.json", {"preset": cfg.lab_preset, "report": rep.to_dict(),
                                              "checks": checks})
    rows = [{"quantity": k, "value": v} for k, v in rep.to_dict().items()]
    rows += [{"quantity": f"check:{k}", "value": "PASS" if ok else "FAIL"} for k, ok in checks.items()]
    (out / "variance_report.csv").write_text(csv_text(["quantity", "value"], rows))
    for k, ok in checks.items():
        print(f"{k}: {'PASS' if ok else 'FAIL'}")
    return 0


def cmd_acd_diag(args):
    cfg = _load_config(args)
    out = _out(cfg)
    rows = run_acd_diag(cfg, model=_model(args))
    (out / "acd_residual.csv").write_text(csv_text(["layer", "delta"], rows))
    print(f"wrote {len(rows)} layer rows to {out / 'acd_residual.csv'}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="rcgrpo", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--scheme", choices=["rdp", "global"])
        return sp

    sp = common(sub.add_parser("rollout", help="roll out one noise group and score it"))
    sp.add_argument("--task", type=int, default=0)
    sp.add_argument("--checkpoint")
    sp.set_defaults(func=cmd_rollout)

    sp = common(sub.add_parser("train", help="run GRPO updates and stream metrics"))
    sp.add_argument("--updates", type=int)
    sp.add_argument("--checkpoint", help="initial model checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("compare", help="RDP vs global training statistics"))
    sp.add_argument("--groups", type=int, default=200)
    sp.set_defaults(func=cmd_compare)

    sp = common(sub.add_parser("variance-lab", help="Monte-Carlo variance verification"))
    sp.add_argument("--preset", choices=["linear-block", "identity", "attn"])
    sp.add_argument("--samples", type=int)
    sp.set_defaults(func=cmd_variance_lab)

    sp = common(sub.add_parser("acd-diag", help="layer-wise ACD residual diagnostic"))
    sp.add_argument("--checkpoint")
    sp.set_defaults(func=cmd_acd_diag)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = int(os.environ.get("RCG_THREADS", "1"))
    try:
        with threadpool_limits(limits=max(threads, 1)):
            return args.func(args)
    except ConfigError as err:
        print(f"invalid config: {err}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
