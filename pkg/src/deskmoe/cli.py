"""Command line: ``deskmoe {train,upcycle,analyze,eval-ppl,report,presets}``.

Exit codes: 0 ok, 2 configuration error, 3 numeric abort, 4 I/O or schema error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis as an
from .checkpoint import Checkpoint, latest_checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, apply_updates, data_root, resolve, write_effective
from .errors import ConfigError, DeskMoeError, StorageError
from .model import ModelConfig, upcycle
from .presets import PRESETS
from .report import compare_runs, family_runs
from .run import evaluate_checkpoint, run_training, write_json
from .train import params_from_arrays

log = logging.getLogger("deskmoe")
METRICS = ("saturation", "coactivation", "domain", "vocab", "assignment", "flows", "all")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON run config (sections: model, train, data, init)")
    p.add_argument("--preset", help="built-in ablation preset (see `deskmoe presets`)")
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="e.g. train.alpha=0 (repeatable)")


def _resolved(args) -> RunConfig:
    cfg = resolve(args.config, args.preset, args.override, args.seed)
    # pin the data location so the effective config replays without the environment
    return apply_updates(cfg, {"data.root": str(data_root(cfg))})


def cmd_train(args) -> int:
    cfg = _resolved(args)
    res = run_training(cfg, args.out, resume=not args.fresh, stop_after=args.stop_after)
    last = res.history[-1] if res.history else {}
    print(json.dumps({"run": str(args.out), "step": res.step, "ce": last.get("ce"), "lb": last.get("lb")}))
    return 0


def cmd_upcycle(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    dense_cfg = ModelConfig.from_dict(ck.model_config)
    cfg = _resolved(args)
    target = cfg.model
    params = upcycle(params_from_arrays(ck.params), dense_cfg, target, args.noise, cfg.seed)
    out = Path(args.out)
    save_checkpoint(out, Checkpoint(0, target.to_dict(), {n: p.data for n, p in params.items()},
                                    extra={"upcycled_from": str(args.checkpoint), "noise_fraction": args.noise}))
    write_effective(apply_updates(cfg, {"init.checkpoint": str(out)}), out.parent / f"{out.name}_run_config")
    print(json.dumps({"checkpoint": str(out), "experts": target.n_experts, "noise_fraction": args.noise}))
    return 0


def _run_logs(run_dir: Path) -> list[Path]:
    logs = sorted((run_dir / "routing").glob("step_*.jsonl"))
    if not logs:
        raise StorageError(f"no routing logs under {run_dir / 'routing'}", "train an MoE run with train.capture_tokens > 0")
    return logs


def cmd_analyze(args) -> int:
    out = Path(args.out)
    if args.run:
        run_dir = Path(args.run)
        logs = _run_logs(run_dir)
        final = Path(args.final) if args.final else logs[-1]
        targets = [Path(args.log)] if args.log else logs[:-1] or logs
    else:
        if not args.log:
            raise ConfigError("analyze needs --run or --log")
        run_dir, logs, final = None, [Path(args.log)], Path(args.final) if args.final else None
        targets = logs
    header = an.read_header(final or targets[0])
    k = header["k"]
    k_evals = [args.k_eval] if args.k_eval else sorted({1, k})
    written = []
    todo = METRICS[:-1] if args.metric == "all" else (args.metric,)

    for metric in todo:
        if metric == "saturation":
            if final is None:
                raise ConfigError("saturation needs --final (or --run)")
            for log_t in targets:
                step = an.read_header(log_t)["step"]
                for ke in k_evals:
                    rep = an.saturation_report(an.router_saturation(log_t, final, ke), ke, header["n_experts"],
                                               {"k_eval": ke, "step": step, "final_step": an.read_header(final)["step"]})
                    written += rep.write(out, f"saturation_step{step}_k{ke}")
        elif metric == "coactivation":
            for layer in range(header["n_layers"]) if args.layer is None else [args.layer]:
                co = an.coactivation(final or targets[0], layer, args.k_eval)
                written += an.coactivation_report(co).write(out, f"coactivation_layer{layer}")
        elif metric == "domain":
            for ke in k_evals:
                spec = an.domain_specialization(final or targets[0], ke)
                written += an.domain_report(spec, ke, header.get("domains", ())).write(out, f"domain_k{ke}")
        elif metric == "vocab":
            variants = [args.variant] if args.variant else list(an.VOCAB_VARIANTS)
            for v in variants:
                for ke in k_evals:
                    vs = an.vocab_specialization(final or targets[0], ke, v, args.min_count)
                    written += an.vocab_report(vs).write(out, f"vocab_{v}_k{ke}")
        elif metric == "assignment":
            source = run_dir / "metrics.jsonl" if run_dir is not None else logs
            written += an.assignment_report(an.assignment_curves(source)).write(out, "assignment")
        elif metric == "flows":
            L = header["n_layers"]
            pairs = [(args.layer, args.layer_b)] if args.layer is not None and args.layer_b is not None else [(l, l + 1) for l in range(L - 1)]
            for a, b in pairs:
                ft = an.cross_layer_flows(final or targets[0], a, b, args.threshold)
                written += an.flow_report(ft).write(out, f"flows_layer{a}_layer{b}")
    print(json.dumps({"reports": [str(p) for p in written]}))
    return 0


def cmd_eval(args) -> int:
    if args.checkpoint:
        ck_path = Path(args.checkpoint)
    elif args.run:
        ck_path = latest_checkpoint(args.run)
        if ck_path is None:
            raise StorageError(f"no checkpoints under {args.run}")
    else:
        raise ConfigError("eval-ppl needs --checkpoint or --run")
    if args.run and (Path(args.run) / "effective_config.yaml").is_file():
        cfg = resolve(Path(args.run) / "effective_config.yaml")
    else:
        cfg = _resolved(args)
    res = evaluate_checkpoint(ck_path, cfg, args.max_tokens)
    if args.out:
        write_json(Path(args.out), res)
    print(json.dumps(res))
    return 0


def cmd_report(args) -> int:
    runs = family_runs(args.family, args.root) if args.family else [Path(r) for r in args.runs]
    payload = compare_runs(runs, args.out)
    print(json.dumps({"out": str(args.out), "runs": [r["run"] for r in payload["runs"]]}))
    return 0


def cmd_presets(args) -> int:
    rows = [
        {"name": p.name, "family": p.family, "control": p.control, "knob": list(p.knob), "topic": p.topic, "updates": p.updates}
        for p in PRESETS.values()
    ]
    if args.json:
        print(json.dumps(rows, indent=1))
    else:
        for r in rows:
            print(f"{r['name']:<20} {r['family']:<22} vs {r['control'] or '-':<20} {','.join(r['knob'])}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deskmoe", description="Desk-scale mixture-of-experts language models")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="run directory (lock-protected)")
    p.add_argument("--fresh", action="store_true", help="ignore existing checkpoints in --out")
    p.add_argument("--stop-after", type=int, help="stop (with a checkpoint) after this many steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("upcycle", help="turn a dense checkpoint into an MoE checkpoint")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True, help="dense checkpoint directory")
    p.add_argument("--noise", type=float, default=0.0, help="fraction of each expert's entries to re-draw")
    p.add_argument("--out", required=True, help="output checkpoint directory")
    p.set_defaults(func=cmd_upcycle)

    p = sub.add_parser("analyze", help="routing metrics over routing logs")
    p.add_argument("metric", choices=METRICS)
    p.add_argument("--run", help="run directory; uses its routing logs (last = final checkpoint)")
    p.add_argument("--log", help="a single routing log (the intermediate one for saturation)")
    p.add_argument("--final", help="final-checkpoint routing log for saturation")
    p.add_argument("--k-eval", type=int)
    p.add_argument("--variant", choices=sorted(an.VOCAB_VARIANTS))
    p.add_argument("--min-count", type=int, default=an.DEFAULT_MIN_COUNT)
    p.add_argument("--layer", type=int)
    p.add_argument("--layer-b", type=int)
    p.add_argument("--threshold", type=float, default=1.5, help="flows: keep experts above threshold x uniform")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("eval-ppl", help="held-out cross-entropy and perplexity")
    _add_run_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--run")
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare runs of a preset family")
    p.add_argument("--family")
    p.add_argument("--root", default="runs", help="directory holding one run per preset name")
    p.add_argument("--runs", nargs="*", default=[])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("presets", help="list the built-in ablation presets")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_presets)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DeskMoeError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
