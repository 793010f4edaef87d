"""Command-line pipeline for the open-set diagnosis experiments.

Every stage reads its inputs from files and writes its outputs to files, so
a Task 2 site training stage can only ever see its own site's data.
``reproduce`` chains the same stage functions the individual verbs use.

Exit codes: 0 success, 2 configuration error, 3 pipeline error.
"""
import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import _io
from .casesim import Dataset, load_dataset, save_dataset, simulate_dataset
from .ensemble import (
    LEARNED_COMBINATIONS,
    NAIVE_COMBINATIONS,
    ExpertSet,
    ensemble_scores_for_eval,
    load_ensemble,
    parse_combination,
    save_ensemble,
    train_moe,
)
from .kbmodel import ConfigError, KbConfig, generate_synthetic_kb, load_kb, save_kb
from .metrics import (
    Unreachable,
    ccr_at_fpr,
    entropy_histogram,
    oscr_from_arrays,
    recall_at_k,
    replicate_summary,
)
from .openset import BG, CE, LOSS_MODES, ModelError, TrainConfig, init_model, load_model, save_model, train
from .splits import (
    SplitDatasets,
    build_label_split,
    build_site_plan,
    build_task1_splits,
    build_task2_splits,
    load_label_split,
    load_site_plan,
    resample_extras,
    save_json,
)

log = logging.getLogger("opendx")

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE = 0, 2, 3
TASK1_PARTS = ("train_select", "val_select", "test_select", "extra_train", "test_unknown")


class PipelineError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class SplitSection:
    profile_cases: int = 50  # simulated cases per disease for the PCA profiles
    n_extra: Optional[int] = None  # None: as many extras as select conditions
    variance_target: float = 0.9
    max_components: int = 500
    cases_per_select: int = 1000
    cases_per_extra: int = 100
    cases_per_unknown: int = 1000
    test_frac: float = 0.2
    val_frac: float = 0.1


@dataclass
class Task2Section:
    m_sites: int = 4
    overlap_percent: object = 50  # a number, or a list for an overlap sweep
    extras_per_site: Optional[int] = None
    heldout_per_select: int = 10
    heldout_per_extra: int = 10
    combinations: list = field(
        default_factory=lambda: list(NAIVE_COMBINATIONS) + list(LEARNED_COMBINATIONS))


@dataclass
class ExperimentConfig:
    kb: KbConfig = field(default_factory=KbConfig)
    split: SplitSection = field(default_factory=SplitSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden: int = 100
    task: str = "task1"
    task2: Task2Section = field(default_factory=Task2Section)
    replicates: int = 3
    seed: int = 0
    out_dir: str = "runs"
    fpr_targets: list = field(default_factory=lambda: [0.1, 0.2, 0.3])
    recall_k: list = field(default_factory=lambda: [1, 3, 5])

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        _reject_unknown(cls, doc, "")
        kw = dict(doc)
        if "kb" in kw:
            kw["kb"] = KbConfig.from_dict(kw["kb"])
        for name, sub in (("split", SplitSection), ("train", TrainConfig), ("task2", Task2Section)):
            if name in kw:
                _reject_unknown(sub, kw[name], name + ".")
                kw[name] = sub(**kw[name])
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def overlaps(self):
        ov = self.task2.overlap_percent
        return [float(v) for v in ov] if isinstance(ov, (list, tuple)) else [float(ov)]

    def validate(self):
        self.kb.validate()
        try:
            self.train.validate()
        except ModelError as exc:
            raise ConfigError("train", str(exc)) from exc
        if self.task not in ("task1", "task2"):
            raise ConfigError("task", "must be 'task1' or 'task2'")
        if self.replicates < 1:
            raise ConfigError("replicates", "must be >= 1")
        if self.hidden < 1:
            raise ConfigError("hidden", "must be >= 1")
        allowed = set(NAIVE_COMBINATIONS) | set(LEARNED_COMBINATIONS)
        for c in self.task2.combinations:
            if c not in allowed:
                raise ConfigError("task2.combinations", f"unknown combination {c!r}")
        if self.task2.m_sites < 1:
            raise ConfigError("task2.m_sites", "must be >= 1")
        for ov in self.overlaps():
            if not 0 <= ov <= 100:
                raise ConfigError("task2.overlap_percent", "must lie in [0, 100]")
        if not 0 <= self.split.test_frac < 1 or not 0 <= self.split.val_frac < 1:
            raise ConfigError("split", "test_frac and val_frac must lie in [0, 1)")
        if self.split.profile_cases < 1:
            raise ConfigError("split.profile_cases", "must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["kb"] = self.kb.to_dict()
        return d


def _reject_unknown(cls, doc, prefix):
    if not isinstance(doc, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "must be a JSON object")
    unknown = set(doc) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(prefix + sorted(unknown)[0], "unknown config field")


def load_config(path, seed=None):
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("--config", f"{path} does not exist")
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"{path} is not valid JSON: {exc}")
    cfg = ExperimentConfig.from_dict(doc)
    if seed is not None:
        cfg.seed = seed
    return cfg


def derive_seed(master, *keys):
    """Independent 32-bit stage seed from the master seed and a key path."""
    ss = np.random.SeedSequence([int(master), *[int(k) for k in keys]])
    return int(ss.generate_state(1, np.uint32)[0])


# stage keys for derive_seed
_S_PROFILE, _S_EXTRAS, _S_CASES, _S_TRAIN, _S_PLAN, _S_MOE = range(1, 7)


# --------------------------------------------------------------------------
# stages (files in, files out)
# --------------------------------------------------------------------------


def stage_kb_gen(kb_config: KbConfig, out_path):
    kb = generate_synthetic_kb(kb_config)
    save_kb(kb, out_path)
    return kb


def stage_profiles(kb_path, cases_per_disease, seed, out_path):
    kb = load_kb(kb_path)
    ds = simulate_dataset(kb, range(kb.n_diseases), cases_per_disease, seed)
    save_dataset(ds, out_path, kb.content_hash(), seed, {"role": "profiles"})


def stage_split(kb_path, profiles_path, split_cfg: SplitSection, seed, out_path):
    kb = load_kb(kb_path)
    profiles, _ = load_dataset(profiles_path, kb.content_hash())
    split = build_label_split(kb, profiles, split_cfg.n_extra, split_cfg.variance_target,
                              split_cfg.max_components, seed)
    save_json(split, out_path, kb_hash=kb.content_hash(), seed=seed,
              profiles_sha256=_io.file_hash(profiles_path))
    return split


def stage_resample(kb_path, split_path, seed, out_path):
    kb = load_kb(kb_path)
    base, _ = load_label_split(split_path)
    split = resample_extras(kb, base, seed)
    save_json(split, out_path, kb_hash=kb.content_hash(), seed=seed,
              base_split_sha256=_io.file_hash(split_path))
    return split


def _check_kb(doc, kb, what):
    h = doc.get("kb_hash")
    if h is not None and h != kb.content_hash():
        raise PipelineError(f"{what} was built from a different knowledge base")


def stage_simulate_task1(kb_path, split_path, split_cfg: SplitSection, seed, out_dir):
    kb = load_kb(kb_path)
    split, doc = load_label_split(split_path)
    _check_kb(doc, kb, split_path)
    sd = build_task1_splits(kb, split, split_cfg.cases_per_select, split_cfg.cases_per_extra,
                            split_cfg.cases_per_unknown, split_cfg.test_frac,
                            split_cfg.val_frac, seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, ds in sd.partitions().items():
        save_dataset(ds, out_dir / f"{name}.jsonl", kb.content_hash(), seed, {"role": name})
    return sd


def load_task1(data_dir, kb_hash=None) -> SplitDatasets:
    data_dir = Path(data_dir)
    parts = {}
    for name in TASK1_PARTS:
        p = data_dir / f"{name}.jsonl"
        if not p.exists():
            raise PipelineError(f"missing prerequisite file {p}")
        parts[name] = load_dataset(p, kb_hash)[0]
    return SplitDatasets(**parts)


def stage_site_plan(split_path, task2: Task2Section, overlap, seed, out_path):
    split, _ = load_label_split(split_path)
    plan = build_site_plan(split.l_select, split.l_extra, task2.m_sites, overlap,
                           task2.extras_per_site, np.random.default_rng(seed))
    save_json(plan, out_path, seed=seed, split_sha256=_io.file_hash(split_path))
    return plan


def stage_simulate_task2(kb_path, split_path, plan_path, task1_dir, split_cfg: SplitSection,
                         task2: Task2Section, seed, out_dir):
    kb = load_kb(kb_path)
    split, _ = load_label_split(split_path)
    plan, _ = load_site_plan(plan_path)
    t1 = load_task1(task1_dir, kb.content_hash())
    t2 = build_task2_splits(kb, split, plan, t1, task2.heldout_per_select,
                            task2.heldout_per_extra, split_cfg.cases_per_select,
                            split_cfg.cases_per_extra, seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h = kb.content_hash()
    for i, s in enumerate(t2.sites):
        save_dataset(s.train, out_dir / f"site{i}_train.jsonl", h, seed, {"role": f"site{i}_train"})
        save_dataset(s.val, out_dir / f"site{i}_val.jsonl", h, seed, {"role": f"site{i}_val"})
    for name in ("heldout", "oracle_train", "oracle_val"):
        save_dataset(getattr(t2, name), out_dir / f"{name}.jsonl", h, seed, {"role": name})
    return t2


def stage_train(train_paths, val_path, class_ids, loss_mode, hidden, config: TrainConfig,
                seed, out_path):
    """Train one model.  For a CE model, cases outside ``class_ids`` are dropped;
    for BG / EOS they are the extra examples."""
    parts = [load_dataset(p)[0] for p in train_paths]
    train_set = Dataset.concat(parts, vocab_size=parts[0].vocab_size)
    val_set = load_dataset(val_path)[0]
    class_ids = sorted(int(c) for c in class_ids)
    if loss_mode == CE:
        train_set = train_set.with_labels([d for d in train_set.label_space if d in set(class_ids)])
    val_set = val_set.with_labels([d for d in val_set.label_space if d in set(class_ids)])
    cfg = TrainConfig(**{**config.to_dict(), "seed": seed})
    model = init_model(train_set.vocab_size, class_ids, loss_mode, hidden, seed)
    best, history = train(model, train_set, val_set, cfg)
    save_model(best, out_path, train_config=cfg.to_dict(),
               train_files={Path(p).name: _io.file_hash(p) for p in train_paths},
               val_file={Path(val_path).name: _io.file_hash(val_path)})
    hist = Path(out_path).with_suffix(".history.csv")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss"])
    for r in history:
        w.writerow([r.epoch, repr(float(r.train_loss)), repr(float(r.val_loss))])
    hist.write_text(buf.getvalue())
    return best, history


def stage_ensemble(expert_paths, heldout_path, combination, l_select, config: TrainConfig,
                   seed, out_path, plan_path=None):
    experts = [load_model(p) for p in expert_paths]
    expert_loss, head = parse_combination(combination)
    for p, e in zip(expert_paths, experts):
        if e.loss_mode != expert_loss:
            raise PipelineError(f"{p} is a {e.loss_mode} model; {combination} needs {expert_loss} experts")
    plan = load_site_plan(plan_path)[0] if plan_path else None
    if l_select is None:
        l_select = plan.l_select if plan else sorted(set().union(*[e.foreground_ids for e in experts]))
    es = ExpertSet(experts, l_select, plan)
    prov = {"seed": seed}
    if plan_path:
        prov["site_plan_sha256"] = _io.file_hash(plan_path)
    moe = None
    if head is not None:
        if heldout_path is None:
            raise PipelineError(f"{combination} needs a heldout dataset")
        heldout = load_dataset(heldout_path)[0]
        cfg = TrainConfig(**{**config.to_dict(), "seed": seed})
        moe, _ = train_moe(es, heldout, head, cfg)
        prov["heldout_sha256"] = _io.file_hash(heldout_path)
        prov["train_config"] = cfg.to_dict()
    save_ensemble(out_path, combination, expert_paths, es, moe, **prov)


def load_scorer(path):
    doc = _io.read_json(path)
    if "kind" in doc:
        return load_ensemble(path)[0]
    return load_model(path)


def _csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    return str(Unreachable) if v is Unreachable else repr(float(v))


def stage_evaluate(scorer_path, test_select_path, test_unknown_path, out_dir,
                   fpr_targets=(0.1, 0.2, 0.3), ks=(1, 3, 5), l_select=None):
    """Write oscr.csv, ccr_at_fpr.csv, recall_at_k.csv and entropy_histogram.csv.

    Returns ``{"CCR@FPR=t": value or Unreachable, "recall@k": value}``.
    """
    scorer = load_scorer(scorer_path)
    known = load_dataset(test_select_path)[0]
    unknown = load_dataset(test_unknown_path)[0]
    both = Dataset.concat([known, unknown], vocab_size=known.vocab_size)
    sc = ensemble_scores_for_eval(scorer, both, l_select)
    nk = len(known)
    curve = oscr_from_arrays(sc.confidence[:nk], sc.correct[:nk], sc.confidence[nk:])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "oscr.csv").write_text(curve.to_csv())

    results = {}
    for t in fpr_targets:
        results[f"CCR@FPR={t}"] = ccr_at_fpr(curve, t)
    (out_dir / "ccr_at_fpr.csv").write_text(
        _csv([[repr(float(t)), _fmt(results[f"CCR@FPR={t}"])] for t in fpr_targets],
             ["target_fpr", "ccr"]))

    col = {c: i for i, c in enumerate(sc.l_select)}
    true = np.array([col[int(d)] for d in known.labels], dtype=np.int64)
    rk = []
    for k in ks:
        if k <= len(sc.l_select):
            results[f"recall@{k}"] = recall_at_k(sc.class_probs[:nk], true, k)
            rk.append([k, _fmt(results[f"recall@{k}"])])
    (out_dir / "recall_at_k.csv").write_text(_csv(rk, ["k", "recall"]))

    is_known = np.arange(len(both)) < nk
    (out_dir / "entropy_histogram.csv").write_text(
        entropy_histogram(sc.output_probs, is_known).to_csv())
    return results


# --------------------------------------------------------------------------
# reproduce
# --------------------------------------------------------------------------


def summarize(per_replicate):
    """``{algorithm: [{metric: value}, ...]}`` -> rows (algorithm, metric, mean, std)."""
    rows = []
    for alg, reps in per_replicate.items():
        for metric in reps[0]:
            vals = [r[metric] for r in reps]
            if any(v is Unreachable for v in vals):
                rows.append([alg, metric, str(Unreachable), str(Unreachable)])
            else:
                m, s = replicate_summary(vals)
                rows.append([alg, metric, repr(m), repr(s)])
    return rows


def render_table(rows, metric_prefix="CCR@FPR="):
    """Plain-text mean±std table, one line per algorithm."""
    algs, metrics, cell = [], [], {}
    for alg, metric, mean, std in rows:
        if not metric.startswith(metric_prefix):
            continue
        if alg not in algs:
            algs.append(alg)
        if metric not in metrics:
            metrics.append(metric)
        cell[alg, metric] = mean if mean == "---" else f"{100 * float(mean):.2f} ± {100 * float(std):.2f}"
    width = max([len(a) for a in algs] + [9])
    lines = [" ".join([f"{'algorithm':<{width}}"] + [f"{m:>16}" for m in metrics])]
    for a in algs:
        lines.append(" ".join([f"{a:<{width}}"] + [f"{cell.get((a, m), ''):>16}" for m in metrics]))
    return "\n".join(lines) + "\n"


def _ccr_only(res):
    return {k: v for k, v in res.items() if k.startswith("CCR@")}


def _recall_only(res):
    return {k: v for k, v in res.items() if k.startswith("recall@")}


def run_task1_replicate(cfg, paths, rep, rdir, results):
    data = rdir / "data"
    t1_seed = derive_seed(cfg.seed, _S_CASES)
    stage_simulate_task1(paths["kb"], rdir / "split.json", cfg.split, t1_seed, data)
    split, _ = load_label_split(rdir / "split.json")
    for mi, mode in enumerate(LOSS_MODES):
        model_path = rdir / "models" / f"{mode}.json"
        model_path.parent.mkdir(parents=True, exist_ok=True)
        train_files = [data / "train_select.jsonl"] + ([] if mode == CE else [data / "extra_train.jsonl"])
        log.info("replicate %d: training %s", rep, mode)
        stage_train(train_files, data / "val_select.jsonl", split.l_select, mode, cfg.hidden,
                    cfg.train, derive_seed(cfg.seed, _S_TRAIN, rep, mi), model_path)
        res = stage_evaluate(model_path, data / "test_select.jsonl", data / "test_unknown.jsonl",
                             rdir / "eval" / mode, cfg.fpr_targets, cfg.recall_k)
        results.setdefault(mode, []).append(res)


def run_task2_replicate(cfg, paths, rep, rdir, results, tag=""):
    t1_dir = rdir / "data"
    t1_seed = derive_seed(cfg.seed, _S_CASES)
    if not (t1_dir / "test_unknown.jsonl").exists():
        stage_simulate_task1(paths["kb"], rdir / "split.json", cfg.split, t1_seed, t1_dir)
    split, _ = load_label_split(rdir / "split.json")
    for oi, ov in enumerate(cfg.overlaps()):
        odir = rdir / f"overlap{ov:g}"
        suffix = f" [overlap={ov:g}%]" if len(cfg.overlaps()) > 1 else ""
        plan_path = odir / "site_plan.json"
        odir.mkdir(parents=True, exist_ok=True)
        plan = stage_site_plan(rdir / "split.json", cfg.task2, ov,
                               derive_seed(cfg.seed, _S_PLAN, rep, oi), plan_path)
        data = odir / "data"
        stage_simulate_task2(paths["kb"], rdir / "split.json", plan_path, t1_dir, cfg.split,
                             cfg.task2, t1_seed, data)
        expert_modes = []
        for combo in cfg.task2.combinations:
            e, _ = parse_combination(combo)
            if e not in expert_modes:
                expert_modes.append(e)
        experts = {}
        for mode in sorted(expert_modes, key=LOSS_MODES.index):
            experts[mode] = []
            for i, site in enumerate(plan.sites):
                p = odir / "models" / f"site{i}_{mode}.json"
                p.parent.mkdir(parents=True, exist_ok=True)
                log.info("replicate %d%s: training site %d %s expert", rep, suffix, i, mode)
                stage_train([data / f"site{i}_train.jsonl"], data / f"site{i}_val.jsonl",
                            site.l_rel, mode, cfg.hidden, cfg.train,
                            derive_seed(cfg.seed, _S_TRAIN, rep, oi, i, LOSS_MODES.index(mode)), p)
                experts[mode].append(p)
        oracle = odir / "models" / "oracle.json"
        log.info("replicate %d%s: training oracle", rep, suffix)
        stage_train([data / "oracle_train.jsonl"], data / "oracle_val.jsonl", split.l_select, BG,
                    cfg.hidden, cfg.train, derive_seed(cfg.seed, _S_TRAIN, rep, oi, 99), oracle)
        test_s, test_u = t1_dir / "test_select.jsonl", t1_dir / "test_unknown.jsonl"
        oracle_res = stage_evaluate(oracle, test_s, test_u, odir / "eval" / "oracle",
                                    cfg.fpr_targets, cfg.recall_k)
        blocks = {"naive": [], "learned": []}
        for ci, combo in enumerate(cfg.task2.combinations):
            e, head = parse_combination(combo)
            block = "naive" if head is None else "learned"
            blocks[block].append(combo)
            ens = odir / "ensembles" / f"{combo}.json"
            ens.parent.mkdir(parents=True, exist_ok=True)
            log.info("replicate %d%s: building %s ensemble %s", rep, suffix, block, combo)
            stage_ensemble(experts[e], data / "heldout.jsonl", combo, split.l_select, cfg.train,
                           derive_seed(cfg.seed, _S_MOE, rep, oi, ci), ens, plan_path)
            res = stage_evaluate(ens, test_s, test_u, odir / "eval" / combo, cfg.fpr_targets,
                                 cfg.recall_k, split.l_select)
            results.setdefault(f"{block}/{combo}{suffix}", []).append(res)
        for block, combos in blocks.items():
            if combos:
                results.setdefault(f"{block}/oracle{suffix}", []).append(oracle_res)


def _order_results(results, cfg):
    if cfg.task == "task1":
        return {m: results[m] for m in LOSS_MODES if m in results}
    order = []
    for ov in cfg.overlaps():
        suffix = f" [overlap={ov:g}%]" if len(cfg.overlaps()) > 1 else ""
        for block, names in (("naive", NAIVE_COMBINATIONS), ("learned", LEARNED_COMBINATIONS)):
            for n in list(names) + ["oracle"]:
                order.append(f"{block}/{n}{suffix}")
    return {k: results[k] for k in order if k in results}


def cmd_reproduce(cfg: ExperimentConfig, out_dir=None):
    """Run every stage for every replicate; returns the summary rows."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _io.write_json(out / "config.json", cfg.to_dict())
    paths = {"kb": out / "kb.json", "profiles": out / "profiles.jsonl", "split": out / "split.json"}
    kb_cfg = KbConfig.from_dict({**cfg.kb.to_dict(), "seed": cfg.seed})
    log.info("generating knowledge base")
    stage_kb_gen(kb_cfg, paths["kb"])
    stage_profiles(paths["kb"], cfg.split.profile_cases, derive_seed(cfg.seed, _S_PROFILE),
                   paths["profiles"])
    log.info("building label split")
    stage_split(paths["kb"], paths["profiles"], cfg.split, derive_seed(cfg.seed, _S_EXTRAS, 0),
                paths["split"])
    results = {}
    for rep in range(cfg.replicates):
        rdir = out / f"rep{rep}"
        rdir.mkdir(parents=True, exist_ok=True)
        stage_resample(paths["kb"], paths["split"], derive_seed(cfg.seed, _S_EXTRAS, rep),
                       rdir / "split.json")
        if cfg.task == "task1":
            run_task1_replicate(cfg, paths, rep, rdir, results)
        else:
            run_task2_replicate(cfg, paths, rep, rdir, results)
    results = _order_results(results, cfg)
    rows = summarize({a: [_ccr_only(r) for r in reps] for a, reps in results.items()})
    (out / "summary.csv").write_text(_csv(rows, ["algorithm", "metric", "mean", "std"]))
    recall_rows = summarize({a: [_recall_only(r) for r in reps] for a, reps in results.items()})
    (out / "recall_summary.csv").write_text(_csv(recall_rows, ["algorithm", "metric", "mean", "std"]))
    table = render_table(rows)
    (out / "summary.txt").write_text(table)
    return rows, table


# --------------------------------------------------------------------------
# argparse front end
# --------------------------------------------------------------------------


def _config_or_default(args):
    if args.config:
        return load_config(args.config, args.seed)
    cfg = ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_kb_gen(args):
    cfg = _config_or_default(args)
    kb_cfg = KbConfig.from_dict({**cfg.kb.to_dict(), "seed": cfg.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kb = stage_kb_gen(kb_cfg, out / "kb.json")
    print(f"wrote {out / 'kb.json'} ({kb.n_diseases} diseases, {kb.n_findings} findings)")


def cmd_split(args):
    cfg = _config_or_default(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    profiles = args.profiles
    if profiles is None:
        profiles = out / "profiles.jsonl"
        stage_profiles(args.kb, cfg.split.profile_cases, derive_seed(cfg.seed, _S_PROFILE), profiles)
    split = stage_split(args.kb, profiles, cfg.split, derive_seed(cfg.seed, _S_EXTRAS, 0),
                        out / "split.json")
    print(f"wrote {out / 'split.json'}: {len(split.l_select)} select, "
          f"{len(split.l_unknown)} unknown, {len(split.l_extra)} extra")
    if cfg.task == "task2":
        for oi, ov in enumerate(cfg.overlaps()):
            p = out / f"site_plan_overlap{ov:g}.json"
            plan = stage_site_plan(out / "split.json", cfg.task2, ov,
                                   derive_seed(cfg.seed, _S_PLAN, 0, oi), p)
            print(f"wrote {p} (measured overlap {plan.overlap_percent:.1f}%)")


def cmd_simulate(args):
    cfg = _config_or_default(args)
    seed = derive_seed(cfg.seed, _S_CASES)
    stage_simulate_task1(args.kb, args.split, cfg.split, seed, args.out)
    print(f"wrote Task 1 datasets to {args.out}")
    if args.site_plan:
        stage_simulate_task2(args.kb, args.split, args.site_plan, args.out, cfg.split, cfg.task2,
                             seed, args.out)
        print(f"wrote Task 2 site datasets to {args.out}")


def cmd_train(args):
    cfg = _config_or_default(args)
    if args.site_plan is not None:
        if args.site is None:
            raise ConfigError("--site", "required with --site-plan")
        classes = load_site_plan(args.site_plan)[0].sites[args.site].l_rel
    elif args.split is not None:
        classes = load_label_split(args.split)[0].l_select
    else:
        raise ConfigError("--split", "give --split or --site-plan/--site to fix the class set")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = args.name or args.loss_mode
    _, hist = stage_train(args.train, args.val, classes, args.loss_mode, cfg.hidden, cfg.train,
                          cfg.seed, out / f"{name}.json")
    print(f"wrote {out / (name + '.json')} after {len(hist)} epochs")


def cmd_ensemble(args):
    cfg = _config_or_default(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    l_select = load_label_split(args.split)[0].l_select if args.split else None
    stage_ensemble(args.experts, args.heldout, args.combination, l_select, cfg.train, cfg.seed,
                   out / f"{args.combination}.json", args.site_plan)
    print(f"wrote {out / (args.combination + '.json')}")


def cmd_evaluate(args):
    cfg = _config_or_default(args)
    l_select = load_label_split(args.split)[0].l_select if args.split else None
    res = stage_evaluate(args.model, args.test_select, args.test_unknown, args.out,
                         cfg.fpr_targets, cfg.recall_k, l_select)
    for k, v in res.items():
        print(f"{k}\t{_fmt(v)}")


def cmd_reproduce_args(args):
    if not args.config:
        raise ConfigError("--config", "reproduce needs a config file")
    cfg = load_config(args.config, args.seed)
    _, table = cmd_reproduce(cfg, args.out)
    sys.stdout.write(table)


def build_parser():
    ap = argparse.ArgumentParser(prog="opendx", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="master seed; overrides the config")
        p.add_argument("--out", required=name != "reproduce", help="output directory")
        p.set_defaults(func=fn)
        return p

    verb("kb-gen", cmd_kb_gen, "generate a synthetic knowledge base")

    p = verb("split", cmd_split, "build the select / unknown / extra label split")
    p.add_argument("--kb", required=True)
    p.add_argument("--profiles", help="profile cases; simulated when omitted")

    p = verb("simulate", cmd_simulate, "simulate Task 1 (and optionally Task 2) datasets")
    p.add_argument("--kb", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--site-plan")

    p = verb("train", cmd_train, "train one open-set model")
    p.add_argument("--train", nargs="+", required=True, help="training dataset file(s)")
    p.add_argument("--val", required=True)
    p.add_argument("--loss-mode", choices=LOSS_MODES, required=True)
    p.add_argument("--split", help="label split giving the class set (Task 1 / oracle)")
    p.add_argument("--site-plan", help="site plan giving the class set of --site")
    p.add_argument("--site", type=int)
    p.add_argument("--name", help="model file stem (default: the loss mode)")

    p = verb("ensemble", cmd_ensemble, "fuse site experts (naive or learned)")
    p.add_argument("--experts", nargs="+", required=True)
    p.add_argument("--combination", required=True,
                   choices=list(NAIVE_COMBINATIONS) + list(LEARNED_COMBINATIONS))
    p.add_argument("--heldout", help="pooled heldout dataset (learned ensembles)")
    p.add_argument("--site-plan")
    p.add_argument("--split")

    p = verb("evaluate", cmd_evaluate, "OSCR, CCR@FPR, recall@k and entropy histograms")
    p.add_argument("--model", required=True, help="model or ensemble file")
    p.add_argument("--test-select", required=True)
    p.add_argument("--test-unknown", required=True)
    p.add_argument("--split")

    verb("reproduce", cmd_reproduce_args, "run the whole experiment from a config")
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
