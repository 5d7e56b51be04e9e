"""Command line entry point: ``t2ue <command> [<subcommand>] [options]``.

Exit codes: 0 success, 1 validation error (bad flags, bad config values),
2 runtime failure. Every run writes ``config.json`` (the resolved config) and
``run.log`` into its run directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

log = logging.getLogger("t2ue")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; validation errors here map to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="RunConfig JSON; flags override it")
    p.add_argument("--seed", type=int, help="overrides every section seed")
    p.add_argument("--out", type=Path, help="run directory (default: <out_root>/<command>-<time>)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="t2ue", description="Text-driven unlearnable examples on a toy captioned corpus.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ds = sub.add_parser("dataset", help="toy corpus").add_subparsers(dest="action", required=True,
                                                                     parser_class=_Parser)
    p = ds.add_parser("gen", help="render a split to PNG + manifest")
    _common(p)
    p.add_argument("--split", required=True, choices=("train", "test", "pretrain"))
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("surrogate", help="surrogate dual encoder").add_subparsers(
        dest="action", required=True, parser_class=_Parser).add_parser("train")
    _common(p)
    p.add_argument("--data", type=Path, help="captioned dataset dir (default: pretrain split in memory)")

    p = sub.add_parser("generator", help="noise generator").add_subparsers(
        dest="action", required=True, parser_class=_Parser).add_parser("train")
    _common(p)
    p.add_argument("--surrogate", type=Path, required=True)
    p.add_argument("--data", type=Path, help="captioned dataset dir (default: train split in memory)")

    p = sub.add_parser("protect", help="zero-contact protection of a dataset")
    _common(p)
    p.add_argument("--mode", choices=("class_wise", "sample_wise"))
    p.add_argument("--generator", type=Path, required=True)
    p.add_argument("--surrogate", type=Path, required=True)
    p.add_argument("--plan-seed", type=int)
    p.add_argument("--template-policy", choices=("fixed", "draw", "own"))
    p.add_argument("--data", type=Path, help="dataset dir to protect (default: train split in memory)")

    p = sub.add_parser("victim", help="victim training").add_subparsers(
        dest="action", required=True, parser_class=_Parser).add_parser("train")
    _common(p)
    p.add_argument("--paradigm", choices=("supervised", "contrastive"))
    p.add_argument("--architecture")
    p.add_argument("--defense", choices=("none", "cutout", "mixup", "augproxy"))
    p.add_argument("--poison-ratio", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--data", type=Path, help="protected train dir (default: clean train split)")
    p.add_argument("--clean", type=Path, help="clean train dir for mixing (default: clean train split)")
    p.add_argument("--test", type=Path, help="clean test dir (default: test split in memory)")

    ev = sub.add_parser("eval", help="evaluate a saved model").add_subparsers(dest="action", required=True,
                                                                            parser_class=_Parser)
    for name in ("retrieval", "classify"):
        p = ev.add_parser(name)
        _common(p)
        p.add_argument("--model", type=Path, required=True)
        p.add_argument("--data", type=Path, help="test dir (default: test split in memory)")

    p = sub.add_parser("bench", help="benchmarks").add_subparsers(
        dest="action", required=True, parser_class=_Parser).add_parser("time")
    _common(p)
    p.add_argument("--generator", type=Path, required=True)
    p.add_argument("--surrogate", type=Path, required=True)
    p.add_argument("--methods", default="random,t2ue,em")

    p = sub.add_parser("sweep", help="generator checkpoint sweep").add_subparsers(
        dest="action", required=True, parser_class=_Parser).add_parser("checkpoints")
    _common(p)
    p.add_argument("--dir", type=Path, required=True, help="directory with generator_epoch*.ckpt")
    p.add_argument("--surrogate", type=Path, required=True)

    p = sub.add_parser("report", help="merge run results into report.json, tables.csv and plots")
    _common(p)
    p.add_argument("results", type=Path, nargs="+", help="results.json files or run dirs")

    p = sub.add_parser("reproduce-all", help="full pipeline plus acceptance criteria")
    _common(p)
    p.add_argument("--profile", choices=("default", "acceptance", "smoke"), default="acceptance")
    p.add_argument("--no-timing", action="store_true", help="skip the wall-clock benchmark")
    return ap


# --- helpers -------------------------------------------------------------------------

def resolve_config(args):
    from .pipeline import PROFILES, RunConfig

    if args.config is not None:
        cfg = RunConfig.load(args.config)
    else:
        cfg = PROFILES[getattr(args, "profile", "default")]()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if os.environ.get("T2UE_OUT"):
        cfg.out_root = os.environ["T2UE_OUT"]
    cfg.validate()
    if args.command == "victim":
        # flag values are checked before any run directory exists
        dataclasses.replace(cfg.victim, **_victim_overrides(args)).validate()
    return cfg


def _victim_overrides(args) -> dict:
    return {k: v for k, v in {"paradigm": args.paradigm, "architecture": args.architecture,
                              "defense": args.defense, "poison_ratio": args.poison_ratio,
                              "epochs": args.epochs}.items() if v is not None}


def run_dir(args, cfg) -> Path:
    if args.out is not None:
        d = args.out
    else:
        name = "-".join(x for x in (args.command, getattr(args, "action", None)) if x)
        d = Path(cfg.out_root) / f"{name}-{time.strftime('%Y%m%d-%H%M%S')}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _samples(path: Path | None, cfg, split: str):
    from .toydata import build_in_memory, load_dataset

    return load_dataset(path) if path is not None else build_in_memory(cfg.dataset, split)


def _write_results(out: Path, runs: dict) -> Path:
    from .evalkit import dumps_canonical

    path = out / "results.json"
    path.write_text(dumps_canonical({"runs": runs}))
    return path


# --- commands ------------------------------------------------------------------------

def cmd_dataset(args, cfg, out):
    from .toydata import generate_dataset

    m = generate_dataset(cfg.dataset, args.split, out, workers=args.workers)
    print(f"wrote {len(m.entries)} samples to {out}")


def cmd_surrogate(args, cfg, out):
    from .evalkit import class_pools, retrieval_eval
    from .surrogate import train_surrogate

    data = _samples(args.data, cfg, "pretrain")
    model, trace = train_surrogate(data, cfg.surrogate.train, cfg.dataset, out, arch=cfg.surrogate.architecture)
    test = _samples(None, cfg, "test")
    i2t, t2i = retrieval_eval(model, test, cfg.eval.k_list, class_pools(test))
    _write_results(out, {"surrogate": {"kind": "surrogate", "metrics": {
        "initial_loss": trace.initial_loss, "final_loss": trace.losses[-1],
        **i2t.metrics("test_"), **t2i.metrics("test_")}}})
    print(f"surrogate saved to {out / 'surrogate.ckpt'}; test I2T Hit@1 {i2t.hit_at[1]:.2f}")


def cmd_generator(args, cfg, out):
    from . import protector
    from .surrogate import SurrogateModel

    sur = SurrogateModel.load(args.surrogate)
    data = _samples(args.data, cfg, "train")
    gen = cfg.generator.build(sur.config["embed_dim"])
    gen, trace = protector.train_generator(data, sur, gen, cfg.generator.train, out,
                                           z_policy=cfg.generator.z_policy)
    _write_results(out, {"generator": {"kind": "generator",
                                       "metrics": {"initial_loss": trace.initial_loss,
                                                   "final_loss": trace.losses[-1]},
                                       "curve": [[r.epoch, r.loss, None] for r in trace.epochs]}})
    print(f"generator saved to {out / 'generator.ckpt'}; loss {trace.initial_loss:.4f} -> {trace.losses[-1]:.4f}")


def cmd_protect(args, cfg, out):
    from . import checkpoint, protector
    from .generator import GeneratorModel
    from .surrogate import SurrogateModel

    p = cfg.protection
    mode = args.mode or p.mode
    policy = args.template_policy or p.template_policy
    seed = args.plan_seed if args.plan_seed is not None else p.plan_seed
    gen, _ = GeneratorModel.load(args.generator)
    sur = SurrogateModel.load(args.surrogate)
    split = "train"
    if args.data is not None:
        from .toydata import DatasetManifest
        split = DatasetManifest.read(Path(args.data) / "manifest.json").split
    plan = protector.make_plan(mode, cfg.dataset, seed, split, template_policy=policy, template_id=p.template_id,
                               latent_dim=gen.latent_dim, epsilon=gen.epsilon)
    plan.write(out / "plan.json")
    # the noise bank is built from the plan alone; images are read only to apply it
    samples = _samples(args.data, cfg, split)
    m = protector.export_protected(samples, gen, sur, plan, out / "data", cfg.dataset, split,
                                   checkpoint.sha256_file(args.generator), noise_dir=out / "noise")
    print(f"protected {len(m.entries)} samples ({mode}) to {out / 'data'}; plan {plan.hash[:12]}")


def cmd_victim(args, cfg, out):
    from . import victim

    over = _victim_overrides(args)
    base = cfg.victim
    if over.get("paradigm", base.paradigm) == "contrastive":
        # contrastive victims follow the surrogate recipe, not the SGD classifier one
        base = victim.contrastive_defaults(architecture=base.architecture, seed=base.seed,
                                           epochs=cfg.eval.contrastive_epochs)
    vc = dataclasses.replace(base, **over)
    vc.validate()
    clean = _samples(args.clean, cfg, "train")
    test = _samples(args.test, cfg, "test")
    protected = _samples(args.data, cfg, "train") if args.data is not None else clean
    train = victim.mix_poison(clean, protected, vc.poison_ratio, vc.seed)
    if vc.paradigm == "supervised":
        model, curve = victim.train_supervised_victim(train, test, vc, cfg.dataset.num_classes)
    else:
        from .surrogate import build_vocab
        model, curve = victim.train_contrastive_victim(train, test, vc, build_vocab(cfg.dataset))
    model.save(out / "victim.ckpt")
    curve.to_csv(out / "curve.csv")
    _write_results(out, {out.name: {"kind": vc.paradigm, "config": dataclasses.asdict(vc),
                                    "metrics": {"final_test_metric": curve.test_metric[-1],
                                                "final_train_loss": curve.train_loss[-1]},
                                    "curve": [list(r) for r in curve.rows()]}})
    print(f"{vc.paradigm} victim: final clean-test metric {curve.test_metric[-1]:.2f}")


def cmd_eval(args, cfg, out):
    from .evalkit import class_pools, classify_eval, retrieval_eval

    test = _samples(args.data, cfg, "test")
    if args.action == "retrieval":
        from .surrogate import SurrogateModel
        model = SurrogateModel.load(args.model)
        i2t, t2i = retrieval_eval(model, test, cfg.eval.k_list, class_pools(test))
        metrics = {**i2t.metrics(""), **t2i.metrics("")}
    else:
        from .victim import Classifier
        metrics = {"top1": classify_eval(Classifier.load(args.model), test)}
    _write_results(out, {f"eval_{args.action}": {"kind": f"eval_{args.action}", "metrics": metrics}})
    print(json.dumps(metrics, sort_keys=True))


def cmd_bench(args, cfg, out):
    from .evalkit import time_generation
    from .generator import GeneratorModel
    from .surrogate import SurrogateModel

    gen, _ = GeneratorModel.load(args.generator)
    sur = SurrogateModel.load(args.surrogate)
    data = _samples(None, cfg, "train")
    if cfg.eval.timing_subset:
        data = data[:cfg.eval.timing_subset]
    em_cfg = dataclasses.replace(cfg.eval.em, mode="sample_wise")
    times = {m: time_generation(m, data, cfg.eval.timing_reps, generator=gen, surrogate=sur, spec=cfg.dataset,
                                em_config=em_cfg, seed=cfg.seed)
             for m in args.methods.split(",")}
    (out / "timing.json").write_text(json.dumps({"samples": len(data), "seconds": times}, indent=1) + "\n")
    print(json.dumps(times, sort_keys=True))


def cmd_sweep(args, cfg, out):
    from . import protector, victim
    from .evalkit import sweep_checkpoints
    from .generator import GeneratorModel
    from .surrogate import SurrogateModel

    sur = SurrogateModel.load(args.surrogate)
    train = _samples(None, cfg, "train")
    test = _samples(None, cfg, "test")
    vc = dataclasses.replace(cfg.victim, paradigm="supervised", epochs=cfg.eval.sweep_victim_epochs)

    def quick(path):
        gen, _ = GeneratorModel.load(path)
        plan = protector.make_plan("class_wise", cfg.dataset, cfg.protection.plan_seed,
                                   latent_dim=gen.latent_dim, epsilon=gen.epsilon)
        protected = protector.protect_samples(train, protector.noise_bank(gen, sur, plan), plan)
        return victim.train_supervised_victim(protected, test, vc, cfg.dataset.num_classes)[1].test_metric[-1]

    curve = sweep_checkpoints(args.dir, quick, out)
    for e, a in curve:
        print(f"epoch {e}: {a:.2f}")


def cmd_report(args, cfg, out):
    from .evalkit import emit_report

    runs = {}
    for path in args.results:
        path = path / "results.json" if path.is_dir() else path
        runs.update(json.loads(path.read_text())["runs"])
    paths = emit_report({"runs": runs}, out)
    print(f"report written to {paths['report']}")


def cmd_reproduce_all(args, cfg, out):
    from .pipeline import reproduce_all

    res = reproduce_all(cfg, out, timing=not args.no_timing)
    for name, c in sorted(res["criteria"].items()):
        print(f"{'PASS' if c['passed'] else 'FAIL'} {name}: {c['detail']}")
    if "timing" in res:
        c = res["timing"]["criterion"]
        print(f"{'PASS' if c['passed'] else 'FAIL'} 9_timing: {c['detail']}")
    print(f"report written to {res['paths']['report']}")


COMMANDS = {"dataset": cmd_dataset, "surrogate": cmd_surrogate, "generator": cmd_generator,
            "protect": cmd_protect, "victim": cmd_victim, "eval": cmd_eval, "bench": cmd_bench,
            "sweep": cmd_sweep, "report": cmd_report, "reproduce-all": cmd_reproduce_all}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except (ValueError, KeyError, IndexError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"t2ue: invalid configuration: {e}", file=sys.stderr)
        return 1

    out = run_dir(args, cfg)
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    if args.verbose:
        root.addHandler(logging.StreamHandler())
    cfg.freeze(out)
    try:
        COMMANDS[args.command](args, cfg, out)
    except ValueError as e:
        log.error("%s", e)
        print(f"t2ue: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error
        log.exception("run failed")
        print(f"t2ue: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    finally:
        root.removeHandler(handler)
        handler.close()
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
