"""Run configuration and the end-to-end acceptance pipeline behind ``reproduce-all``."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import checkpoint, evalkit, protector, victim
from .config import TrainConfig, from_dict, to_dict
from .generator import GeneratorModel
from .surrogate import ARCHITECTURES, SurrogateModel, build_vocab, train_surrogate
from .toydata import DatasetSpec, build_in_memory, load_dataset

log = logging.getLogger(__name__)


# --- config sections ---------------------------------------------------------------

@dataclass
class SurrogateSection:
    architecture: str = "conv4"
    # one pair per class in each batch, so 16 at most on the default corpus
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30, batch_size=16))

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"surrogate.architecture must be one of {ARCHITECTURES}")
        self.train.validate()


@dataclass
class GeneratorSection:
    latent_dim: int = 64
    base_channels: int = 128
    block_channels: tuple[int, ...] = (64, 32, 16)
    epsilon: float = 8 / 255
    head_init_scale: float = 1.0
    z_policy: str = "resample"
    # Adam with decoupled weight decay; the decay strength is not published, 0.01 is the AdamW default
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=200, batch_size=16, optimizer="adamw",
                                                                   lr=1e-4, weight_decay=0.01, checkpoint_every=10))

    def validate(self) -> None:
        if self.latent_dim < 1 or self.base_channels < 1 or not self.block_channels:
            raise ValueError("generator: latent_dim, base_channels and block_channels must be positive")
        if self.z_policy not in protector.Z_POLICIES:
            raise ValueError(f"generator.z_policy must be one of {protector.Z_POLICIES}")
        self.train.validate()

    def build(self, cond_dim: int) -> GeneratorModel:
        torch.manual_seed(self.train.seed)
        return GeneratorModel(cond_dim=cond_dim, latent_dim=self.latent_dim, base_channels=self.base_channels,
                              block_channels=tuple(self.block_channels), epsilon=self.epsilon,
                              head_init_scale=self.head_init_scale)


@dataclass
class ProtectionSection:
    mode: str = "class_wise"
    plan_seed: int = 7
    template_policy: str | None = None
    template_id: int = 0

    def validate(self) -> None:
        if self.mode not in protector.MODES:
            raise ValueError(f"protection.mode must be one of {protector.MODES}")


@dataclass
class EvalSection:
    k_list: tuple[int, ...] = (1, 5, 10)
    contrastive_epochs: int = 30
    architectures: tuple[str, ...] = ARCHITECTURES
    poison_ratios: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    defenses: tuple[str, ...] = ("cutout", "mixup")
    sweep_victim_epochs: int = 10
    timing_reps: int = 3
    timing_subset: int = 512
    em: victim.EMConfig = field(default_factory=victim.EMConfig)

    def validate(self) -> None:
        if not self.k_list or min(self.k_list) < 1:
            raise ValueError("eval.k_list must hold positive integers")
        for a in self.architectures:
            if a not in ARCHITECTURES:
                raise ValueError(f"eval.architectures: unknown {a!r}")
        for r in self.poison_ratios:
            if not 0.0 <= r <= 1.0:
                raise ValueError("poison-ratio must be in [0,1]")
        self.em.validate()


_NESTED = {"train": TrainConfig, "em": victim.EMConfig}
_TUPLES = ("block_channels", "k_list", "architectures", "poison_ratios", "defenses")


def _section(cls, d: dict | None):
    d = dict(d or {})
    for key, sub in _NESTED.items():
        if key in d and isinstance(d[key], dict):
            d[key] = from_dict(sub, d[key])
    for key in _TUPLES:
        if key in d and isinstance(d[key], list):
            d[key] = tuple(d[key])
    return from_dict(cls, d)


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    surrogate: SurrogateSection = field(default_factory=SurrogateSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    protection: ProtectionSection = field(default_factory=ProtectionSection)
    victim: victim.VictimConfig = field(default_factory=victim.VictimConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0
    out_root: str = "runs"

    def validate(self) -> None:
        self.dataset.validate()
        for s in (self.surrogate, self.generator, self.protection, self.victim, self.eval):
            s.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"RunConfig: unknown key(s) {sorted(extra)}")
        cfg = cls(
            dataset=DatasetSpec.from_dict(d["dataset"]) if "dataset" in d else DatasetSpec(),
            surrogate=_section(SurrogateSection, d.get("surrogate")),
            generator=_section(GeneratorSection, d.get("generator")),
            protection=_section(ProtectionSection, d.get("protection")),
            victim=from_dict(victim.VictimConfig, d.get("victim")),
            eval=_section(EvalSection, d.get("eval")),
            seed=int(d.get("seed", 0)),
            out_root=str(d.get("out_root", "runs")),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        cfg = cls.from_dict(json.loads(path.read_text()))
        if not Path(cfg.out_root).is_absolute():
            cfg.out_root = str((path.parent / cfg.out_root).resolve())
        return cfg

    def to_dict(self) -> dict:
        d = to_dict(self)
        d["dataset"] = self.dataset.to_dict()
        return json.loads(json.dumps(d))

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with ``seed`` pushed into every section seed."""
        cfg = copy.deepcopy(self)
        cfg.seed = seed
        cfg.dataset = dataclasses.replace(cfg.dataset, seed=seed)
        cfg.surrogate.train.seed = seed
        cfg.generator.train.seed = seed
        cfg.victim.seed = seed
        cfg.eval.em.seed = seed
        return cfg

    def freeze(self, run_dir: str | Path) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / "config.json"
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")
        return path


def acceptance_profile() -> RunConfig:
    """Budget used by the acceptance run on a single CPU core."""
    cfg = RunConfig()
    cfg.dataset = dataclasses.replace(cfg.dataset, samples_per_class={"train": 150, "test": 50, "pretrain": 150})
    # 20 epochs at lr 1e-3 stand in for 200 at 1e-4
    cfg.generator.train = dataclasses.replace(cfg.generator.train, epochs=20, lr=1e-3, checkpoint_every=2)
    cfg.victim = dataclasses.replace(cfg.victim, epochs=30)
    return cfg


def smoke_profile() -> RunConfig:
    """Tiny end-to-end run that exercises every stage in a couple of minutes."""
    cfg = RunConfig()
    cfg.dataset = dataclasses.replace(cfg.dataset, samples_per_class={"train": 8, "test": 4, "pretrain": 8})
    cfg.surrogate.train = TrainConfig(epochs=2, batch_size=16)
    cfg.generator.train = dataclasses.replace(cfg.generator.train, epochs=2, checkpoint_every=1)
    cfg.victim = dataclasses.replace(cfg.victim, epochs=2, batch_size=16)
    cfg.eval = EvalSection(contrastive_epochs=2, poison_ratios=(0.0, 0.5, 1.0), sweep_victim_epochs=1,
                           timing_reps=1, timing_subset=16,
                           em=victim.EMConfig(model_steps=2, pgd_steps=2, rounds=2, batch_size=16))
    return cfg


PROFILES = {"default": RunConfig, "acceptance": acceptance_profile, "smoke": smoke_profile}


# --- reproduce-all -----------------------------------------------------------------

def _curve(c: victim.LearningCurve) -> list[list[float]]:
    return [list(r) for r in c.rows()]


def _final(c: victim.LearningCurve) -> float:
    return float(c.test_metric[-1])


def _check(passed: bool, detail: str) -> dict:
    return {"passed": bool(passed), "detail": detail}


class Pipeline:
    """Stages of the acceptance pipeline; each stage caches its artifacts in ``run_dir``."""

    def __init__(self, cfg: RunConfig, run_dir: str | Path):
        cfg.validate()
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        cfg.freeze(self.run_dir)
        self.runs: dict[str, dict] = {}
        spec = cfg.dataset
        self.train = build_in_memory(spec, "train")
        self.test = build_in_memory(spec, "test")
        self.vocab = build_vocab(spec)

    # stages

    def fit_surrogate(self) -> SurrogateModel:
        cfg = self.cfg
        pre = build_in_memory(cfg.dataset, "pretrain")
        model, trace = train_surrogate(pre, cfg.surrogate.train, cfg.dataset, self.run_dir / "surrogate",
                                       arch=cfg.surrogate.architecture)
        i2t, t2i = evalkit.retrieval_eval(model, self.test, cfg.eval.k_list, evalkit.class_pools(self.test))
        self.runs["surrogate"] = {"kind": "surrogate", "config": {"architecture": cfg.surrogate.architecture},
                                  "metrics": {"initial_loss": trace.initial_loss, "final_loss": trace.losses[-1],
                                              **i2t.metrics("test_"), **t2i.metrics("test_")}}
        self.surrogate = model
        return model

    def fit_generator(self) -> GeneratorModel:
        cfg = self.cfg.generator
        gen = cfg.build(self.surrogate.config["embed_dim"])
        gen, trace = protector.train_generator(self.train, self.surrogate, gen, cfg.train, self.run_dir / "generator",
                                              z_policy=cfg.z_policy)
        self.runs["generator"] = {
            "kind": "generator", "config": {"epochs": cfg.train.epochs},
            "metrics": {"initial_loss": trace.initial_loss, "clean_initial_loss": trace.clean_initial_loss,
                        "final_loss": trace.losses[-1],
                        "surrogate_unchanged": float(trace.surrogate_hash_before == trace.surrogate_hash_after)},
            "curve": [[r.epoch, r.loss, None] for r in trace.epochs]}
        self.generator = gen
        self.generator_hash = checkpoint.sha256_file(self.run_dir / "generator" / "generator.ckpt")
        return gen

    def protect(self, mode: str, gen: GeneratorModel | None = None, export: bool = True):
        """Protected train split; exported to PNG and reloaded so the disk path is exercised."""
        p = self.cfg.protection
        gen = gen or self.generator
        policy = None if mode == "class_wise" else "own"
        plan = protector.make_plan(mode, self.cfg.dataset, p.plan_seed, "train", template_policy=policy,
                                   template_id=p.template_id, latent_dim=gen.latent_dim, epsilon=gen.epsilon)
        if not export:
            return protector.protect_samples(self.train, protector.noise_bank(gen, self.surrogate, plan), plan)
        out = self.run_dir / f"protected_{mode}"
        out.mkdir(parents=True, exist_ok=True)
        plan.write(out / "plan.json")
        protector.export_protected(self.train, gen, self.surrogate, plan, out, self.cfg.dataset, "train",
                                   self.generator_hash, noise_dir=out / "noise")
        return load_dataset(out)

    def supervised(self, run_id: str, train, noise: str, zero_contact: bool | None = None, **overrides) -> float:
        vc = dataclasses.replace(self.cfg.victim, paradigm="supervised", **overrides)
        _, curve = victim.train_supervised_victim(train, self.test, vc, self.cfg.dataset.num_classes)
        return self._record(run_id, "supervised", vc, noise, curve, zero_contact)

    def contrastive(self, run_id: str, train, noise: str, zero_contact: bool | None = None) -> float:
        vc = victim.contrastive_defaults(epochs=self.cfg.eval.contrastive_epochs, seed=self.cfg.victim.seed)
        _, curve = victim.train_contrastive_victim(train, self.test, vc, self.vocab)
        return self._record(run_id, "contrastive", vc, noise, curve, zero_contact)

    def _record(self, run_id, kind, vc, noise, curve, zero_contact) -> float:
        curve.to_csv(self.run_dir / f"curve_{run_id}.csv")
        run = {"kind": kind, "config": {"paradigm": vc.paradigm, "architecture": vc.architecture, "noise": noise,
                                        "defense": vc.defense, "poison_ratio": vc.poison_ratio},
               "metrics": {"final_test_metric": _final(curve), "final_train_loss": curve.train_loss[-1]},
               "curve": _curve(curve)}
        if zero_contact is not None:
            run["zero_contact"] = zero_contact
        self.runs[run_id] = run
        log.info("%s: final test metric %.2f", run_id, _final(curve))
        return _final(curve)

    def sweep(self) -> list[tuple[int, float]]:
        epochs = self.cfg.eval.sweep_victim_epochs

        def quick(path: Path) -> float:
            gen, _ = GeneratorModel.load(path)
            protected = self.protect("class_wise", gen, export=False)
            vc = dataclasses.replace(self.cfg.victim, paradigm="supervised", epochs=epochs)
            _, curve = victim.train_supervised_victim(protected, self.test, vc, self.cfg.dataset.num_classes)
            return _final(curve)

        curve = evalkit.sweep_checkpoints(self.run_dir / "generator", quick, self.run_dir / "sweep")
        self.runs["sweep"] = {"kind": "sweep", "config": {"victim_epochs": epochs},
                              "metrics": {f"epoch{e:04d}": a for e, a in curve},
                              "curve": [[e, None, a] for e, a in curve]}
        return curve

    def timing(self) -> dict:
        """Wall-clock generation times on a shared subset; kept out of report.json."""
        ev = self.cfg.eval
        subset = self.train[:ev.timing_subset] if ev.timing_subset else self.train
        em_cfg = dataclasses.replace(ev.em, mode="sample_wise")
        times = {m: evalkit.time_generation(m, subset, ev.timing_reps, generator=self.generator,
                                            surrogate=self.surrogate, spec=self.cfg.dataset, em_config=em_cfg,
                                            seed=self.cfg.seed)
                 for m in ("random", "t2ue", "em")}
        speedup = times["em"] / times["t2ue"]
        return {"samples": len(subset), "reps": ev.timing_reps, "seconds": times, "em_over_t2ue": speedup,
                "criterion": _check(speedup >= 3 and times["random"] < times["t2ue"] < times["em"],
                                    f"random {times['random']:.4f}s, t2ue {times['t2ue']:.4f}s, "
                                    f"em {times['em']:.4f}s, em/t2ue {speedup:.1f}x")}


def reproduce_all(cfg: RunConfig, run_dir: str | Path, timing: bool = True) -> dict:
    """Train every stage, run the victim matrix and judge the acceptance criteria.

    Returns the results dict handed to ``emit_report``; timing (non-deterministic)
    goes to ``timing.json`` next to the report.
    """
    t_start = time.perf_counter()
    torch.set_num_threads(1)
    p = Pipeline(cfg, run_dir)
    ev = cfg.eval
    chance = 100.0 / cfg.dataset.num_classes

    p.fit_surrogate()
    p.fit_generator()
    cw = p.protect("class_wise")
    sw = p.protect("sample_wise")
    rnd = victim.apply_bank(p.train, victim.random_noise_bank(p.train, cfg.generator.epsilon, cfg.seed),
                            "sample_wise")

    # contrastive: clean vs sample-wise T2UE vs random
    c_clean = p.contrastive("contrastive_clean", p.train, "none")
    c_t2ue = p.contrastive("contrastive_t2ue_sample_wise", sw, "t2ue_sample_wise", zero_contact=True)
    c_rand = p.contrastive("contrastive_random", rnd, "random", zero_contact=True)

    # supervised: clean, class-wise T2UE, EM, random
    s_clean = p.supervised("supervised_clean", p.train, "none")
    s_t2ue = p.supervised("supervised_t2ue_class_wise", cw, "t2ue_class_wise", zero_contact=True)
    em = victim.em_baseline_noise(p.train, dataclasses.replace(ev.em, seed=cfg.seed))
    s_em = p.supervised("supervised_em", victim.apply_bank(p.train, em.bank(), em.mode), f"em_{em.mode}",
                        zero_contact=False)
    p.runs["em_noise"] = {"kind": "em_noise", "config": {"noise": f"em_{em.mode}"}, "zero_contact": False,
                          "metrics": {f"round{i}": v for i, v in enumerate(em.round_losses)}}
    s_rand = p.supervised("supervised_random", rnd, "random", zero_contact=True)

    arch = {"conv4": s_t2ue}
    for a in ev.architectures:
        if a != "conv4":
            arch[a] = p.supervised(f"supervised_t2ue_class_wise_{a}", cw, "t2ue_class_wise", True, architecture=a)

    # ratio 0 and 1 reproduce the clean and fully protected runs exactly, so they are reused
    ratios = {}
    for r in ev.poison_ratios:
        if r in (0.0, 1.0):
            ratios[r] = s_t2ue if r else s_clean
        else:
            ratios[r] = p.supervised(f"ratio_{r:.1f}", victim.mix_poison(p.train, cw, r, cfg.seed),
                                     "t2ue_class_wise", True, poison_ratio=r)

    defenses = {d: p.supervised(f"defense_{d}", cw, "t2ue_class_wise", True, defense=d) for d in ev.defenses}
    sweep = p.sweep()

    # criteria 3-8 are judged here; 1-2 are property suites, 9 is timing, 10 compares two runs
    crit = {}
    c_ok = c_clean >= 80 and c_t2ue <= 0.5 * c_clean and abs(c_rand - c_clean) <= 10
    crit["3_contrastive_protection"] = _check(
        c_ok, f"clean I2T Hit@1 {c_clean:.2f}, t2ue {c_t2ue:.2f} (limit {0.5 * c_clean:.2f}), random {c_rand:.2f}")
    crit["4_supervised_transfer"] = _check(
        s_clean >= 90 and s_t2ue <= chance + 10 and s_em <= chance + 10,
        f"clean {s_clean:.2f}, t2ue class-wise {s_t2ue:.2f}, em {s_em:.2f} (non-zero-contact), "
        f"random {s_rand:.2f}; limit {chance + 10:.2f}")
    crit["5_architecture_transfer"] = _check(
        all(v <= chance + 10 for v in arch.values()), ", ".join(f"{a} {v:.2f}" for a, v in sorted(arch.items())))
    rs = sorted(ratios)
    mono = all(ratios[b] <= ratios[a] + 3 for a, b in zip(rs, rs[1:]))
    crit["6_poison_ratio_monotone"] = _check(
        mono and ratios[rs[-1]] <= chance + 10, ", ".join(f"{r:.1f}: {ratios[r]:.2f}" for r in rs))
    crit["7_defense_robustness"] = _check(
        all(v <= chance + 15 for v in defenses.values()),
        ", ".join(f"{d} {v:.2f}" for d, v in sorted(defenses.items())) + f"; limit {chance + 15:.2f}")
    crit["8_checkpoint_sweep"] = _check(
        sweep[0][1] - sweep[-1][1] >= 20,
        f"first epoch {sweep[0][0]} acc {sweep[0][1]:.2f}, last epoch {sweep[-1][0]} acc {sweep[-1][1]:.2f}")

    results = {"meta": {"seed": cfg.seed, "eval_split": "clean test", "config": cfg.to_dict()}, "runs": p.runs, "criteria": crit}
    paths = evalkit.emit_report(results, p.run_dir)
    if timing:
        t = p.timing()
        t["pipeline_seconds"] = time.perf_counter() - t_start
        (p.run_dir / "timing.json").write_text(json.dumps(t, indent=1, sort_keys=True) + "\n")
        results["timing"] = t
    results["paths"] = {k: str(v) for k, v in paths.items()}
    return results


def load_report(run_dir: str | Path) -> dict:
    return json.loads((Path(run_dir) / "report.json").read_text())

