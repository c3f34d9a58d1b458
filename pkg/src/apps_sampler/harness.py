"""Experiment runs, baselines and Monte Carlo studies.

Every study is a pure function of its arguments and seed: repetition ``r``
runs with seed ``seed + r`` and results are reduced in repetition order,
so serial and parallel execution give identical reports.
"""

import csv
import io
import json
import math
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .engine import RunConfig, run_apps
from .exceptions import ConfigurationError, InputError
from .lm import ToyModelSpec, build_model
from .oracle import FiniteDistribution, chi_square, enumerate_power_target, enumerate_proposal
from .potentials import LearnedPotential, RolloutConfig, RolloutPotential, build_potential
from .proposal import ProposalConfig, sample_paths
from .rng import BASELINE, CounterRNG
from .validation import check_choice, check_positive

BASELINES = ("ancestral", "low-temp", "best-of-n")


def parallel_map(fn, tasks, workers=1):
    """``map`` in task order, optionally over worker processes."""
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def mean_se(values):
    v = np.asarray(values, dtype=float)
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return {"mean": float(v.mean()), "se": se, "n": int(v.size)}


def total_variation(p, q):
    return 0.5 * float(np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)).sum())


@dataclass
class StudyReport:
    """Per-repetition records plus aggregates derived from them.

    ``records`` are flat dicts carrying a ``group`` label.  ``aggregates``
    maps each group to mean and standard error of every numeric field in
    ``metrics``; :meth:`recompute` rebuilds them from the records alone.
    ``summary`` holds study-level quantities derived from the aggregates.
    """

    name: str
    settings: dict
    records: list
    metrics: list
    aggregates: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = self.recompute()

    def recompute(self):
        groups = {}
        for rec in self.records:
            groups.setdefault(str(rec["group"]), []).append(rec)
        return {g: {m: mean_se([r[m] for r in recs]) for m in self.metrics} for g, recs in groups.items()}

    def to_dict(self):
        return {
            "name": self.name,
            "settings": self.settings,
            "records": self.records,
            "metrics": self.metrics,
            "aggregates": self.aggregates,
            "summary": self.summary,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        keys = ["group", "rep"] + list(self.metrics)
        writer = csv.DictWriter(buf, fieldnames=keys, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for rec in self.records:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items() if k in keys})
        return buf.getvalue()

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, f"{self.name}_report.json"), "w") as fh:
            fh.write(self.to_json())
        with open(os.path.join(directory, f"{self.name}_records.csv"), "w") as fh:
            fh.write(self.to_csv())


# ----------------------------------------------------------------------------
# baselines


@dataclass
class BaselineResult:
    completions: list
    log_p: np.ndarray

    def distribution(self):
        counts = Counter(self.completions)
        support = sorted(counts)
        return FiniteDistribution(support, np.array([counts[s] for s in support], dtype=float) / len(self.completions))


def _draw(model, prompt, n, n_tokens, proposal, rng, slots):
    states = model.initial_states(n, prompt)
    tokens, _, lp, _, lengths = sample_paths(
        model, states, np.zeros(n, dtype=np.int64), n_tokens, proposal, rng, BASELINE, 0, slots
    )
    return [tuple(int(t) for t in row[:k]) for row, k in zip(tokens, lengths)], lp


def baseline(kind, model, n_samples=1, max_tokens=16, alpha=4.0, n_best=1, seed=0, prompt=()):
    """Reference decoders.

    ``ancestral`` samples the base model, ``low-temp`` samples at temperature
    ``1/alpha`` and ``best-of-n`` keeps, for each sample, the most likely of
    ``n_best`` ancestral draws under the base model.  Sample ``s`` of
    best-of-n reads draw slots ``s*n_best .. s*n_best + n_best - 1``, so
    best-of-1 reproduces ancestral sampling exactly.
    """
    check_choice(kind, "kind", BASELINES)
    check_positive(n_samples, "n_samples", integer=True)
    check_positive(n_best, "n_best", integer=True)
    check_positive(max_tokens, "max_tokens", integer=True)
    check_positive(alpha, "alpha")
    rng = CounterRNG(seed)
    if kind == "low-temp":
        comps, lp = _draw(model, prompt, n_samples, max_tokens, ProposalConfig(1.0 / alpha), rng, np.arange(n_samples))
        lp = np.array([model.sequence_logprob(c, model.encode_prompt(prompt)) for c in comps])
        return BaselineResult(comps, lp)
    n = n_best if kind == "best-of-n" else 1
    comps, lp = _draw(model, prompt, n_samples * n, max_tokens, ProposalConfig(1.0), rng, np.arange(n_samples * n))
    best = np.argmax(lp.reshape(n_samples, n), axis=1) + np.arange(n_samples) * n
    return BaselineResult([comps[i] for i in best], lp[best])


# ----------------------------------------------------------------------------
# single experiment


def _potential_for(cfg):
    if cfg.run.apf_mode == "learned":
        from .value_head import ValueHead

        return LearnedPotential(ValueHead.load(cfg.head_path))
    return build_potential(cfg.run.apf_mode, cfg.rollout)


def _run_rep(task):
    model, prompt, run_cfg, potential, rep = task
    result = run_apps(model, prompt, run_cfg, potential if run_cfg.apf_mode != "none" else None)
    i = result.index
    pop = result.population
    diag = result.diagnostics()
    record = {
        "group": "run",
        "rep": rep,
        "seed": run_cfg.seed,
        "completion": list(result.completion),
        "length": len(result.completion),
        "log_p": float(pop.log_p[i]),
        "log_q": float(pop.log_q[i]),
        "ancestry_score": float(pop.ancestry[i]),
        "potential_cost": int(sum(t.potential_cost for t in result.trace)),
    }
    for k, v in diag.items():
        record[k] = float("nan") if v is None else v
    trace = [dict(t.to_dict(), rep=rep) for t in result.trace]
    return record, trace


RUN_METRICS = ["length", "log_p", "log_q", "ancestry_score", "potential_cost", "mean_active_population",
               "fraction_at_min", "mean_ambiguity", "mean_abs_change", "increases", "decreases", "n_blocks"]


def run_experiment(cfg, workers=None):
    """Run ``cfg.repetitions`` seeded repetitions of the configured sampler.

    Returns ``(report, trace_records)``.
    """
    model = build_model(cfg.model)
    potential = _potential_for(cfg)
    tasks = [(model, cfg.prompt, cfg.run.with_updates(seed=cfg.run.seed + r), potential, r)
             for r in range(cfg.repetitions)]
    out = parallel_map(_run_rep, tasks, workers or cfg.workers)
    records = [r for r, _ in out]
    traces = [t for _, tr in out for t in tr]
    summary = {}
    if cfg.oracle_check:
        summary["oracle"] = _oracle_check(model, cfg, records)
    # output location and worker count do not affect results, keep them out of the report
    settings = {k: v for k, v in cfg.to_dict().items() if k not in ("output_dir", "workers")}
    report = StudyReport("run", settings, records, RUN_METRICS, summary=summary)
    return report, traces


def _oracle_check(model, cfg, records):
    B = cfg.run.block_size
    if cfg.run.max_tokens % B:
        raise ConfigurationError("oracle check needs max_tokens to be a multiple of block_size")
    tables = enumerate_power_target(model, model.encode_prompt(cfg.prompt), cfg.run.max_tokens // B, B, cfg.run.alpha)
    target = tables.sequence_distribution()
    counts = Counter(tuple(r["completion"]) for r in records)
    emp = np.array([counts.get(s, 0) for s in target.support], dtype=float) / len(records)
    return {"tv_completion_distribution": total_variation(emp, target.probs), "log_Z": tables.log_Z}


def write_run_artifacts(report, traces, directory):
    """Trace JSONL, summary JSON and per-repetition metrics CSV."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "trace.jsonl"), "w") as fh:
        for t in traces:
            fh.write(json.dumps(t, sort_keys=True) + "\n")
    with open(os.path.join(directory, "summary.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(directory, "metrics.csv"), "w") as fh:
        fh.write(report.to_csv())
    return [os.path.join(directory, n) for n in ("trace.jsonl", "summary.json", "metrics.csv")]


# ----------------------------------------------------------------------------
# test functions for convergence studies (module level so they pickle)


@dataclass(frozen=True)
class BlockIndicator:
    """``f(x) = 1`` when block ``block`` (1-based) of ``x`` equals ``value``."""

    block: int
    value: tuple
    block_size: int = 1

    def __call__(self, tokens):
        lo = (self.block - 1) * self.block_size
        return float(tuple(tokens[lo : lo + self.block_size]) == tuple(self.value))

    @property
    def name(self):
        return f"block{self.block}={''.join(map(str, self.value))}"


@dataclass(frozen=True)
class ConstantFunction:
    value: float = 1.0

    def __call__(self, tokens):
        return self.value

    @property
    def name(self):
        return f"const{self.value:g}"


def weighted_estimate(population, fn):
    """Self-normalised estimate of ``E[fn]`` from the final population."""
    lw = population.log_w
    w = np.exp(lw - lw.max())
    w /= w.sum()
    vals = np.array([fn(population.prefix(i)) for i in range(population.size)])
    return float(w @ vals)


def bounded_test_bound(chi2, n_particles):
    """Upper bound on the mean absolute error of a self-normalised estimate of a test function bounded by 1."""
    return 4.0 / math.sqrt(n_particles) * math.sqrt(1.0 + chi2) + 8.0 * chi2 / n_particles


def _estimate_rep(task):
    model, run_cfg, potential, fns, exact, group, rep = task
    result = run_apps(model, None, run_cfg, potential)
    rec = {"group": group, "rep": rep, "seed": run_cfg.seed}
    for fn, truth in zip(fns, exact):
        est = weighted_estimate(result.population, fn)
        rec[f"est_{fn.name}"] = est
        rec[f"err_{fn.name}"] = abs(est - truth)
    return rec


def _oracle_expectation(tables, fn):
    dist = tables.sequence_distribution()
    return float(sum(p * fn(s) for s, p in zip(dist.support, dist.probs)))


def _fit_slope(ps, errors):
    ps = np.asarray(ps, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if (errors <= 0).any() or np.unique(ps).size < 2:
        return None
    return float(np.polyfit(np.log(ps), np.log(errors), 1)[0])


def convergence_study(model, n_blocks, block_size, particles, repetitions, test_functions, run_config=None, seed=0,
                      workers=1):
    """Error of self-normalised estimates versus population size, resampling off.

    Records one row per ``(P, repetition)``.  The summary holds, per test
    function, the mean error at each ``P``, the fitted log-log slope and
    the theoretical bound built from the exact chi-square divergence
    between the target and the proposal path law.
    """
    base = run_config or RunConfig()
    base = base.with_updates(block_size=block_size, max_tokens=n_blocks * block_size, resampling=False,
                             apf_mode="none", dynamic_allocation=False)
    tables = enumerate_power_target(model, None, n_blocks, block_size, base.alpha)
    log_q = enumerate_proposal(model, None, n_blocks, block_size, base.proposal)
    pi = np.exp(tables.log_gamma[-1] - tables.log_Z)
    chi2 = chi_square(pi, np.exp(log_q))
    fns = list(test_functions)
    exact = [_oracle_expectation(tables, f) for f in fns]
    tasks = []
    for P in particles:
        cfg = base.with_updates(max_particles=int(P), min_particles=int(P))
        for r in range(repetitions):
            tasks.append((model, cfg.with_updates(seed=seed + r), None, fns, exact, int(P), r))
    records = parallel_map(_estimate_rep, tasks, workers)
    metrics = [f"err_{f.name}" for f in fns] + [f"est_{f.name}" for f in fns]
    report = StudyReport(
        "convergence",
        {"particles": list(map(int, particles)), "repetitions": repetitions, "seed": seed, "run": base.to_dict()},
        records,
        metrics,
    )
    per_fn = {}
    for f, truth in zip(fns, exact):
        errs = [report.aggregates[str(int(P))][f"err_{f.name}"]["mean"] for P in particles]
        per_fn[f.name] = {
            "exact": truth,
            "mean_error": errs,
            "slope": _fit_slope(particles, errs),
            "bound": [bounded_test_bound(chi2, P) for P in particles],
        }
    report.summary = {"chi_square": chi2, "functions": per_fn}
    return report


def _marginal_rep(task):
    model, run_cfg, potential, n_blocks, block_size, group, rep = task
    result = run_apps(model, None, run_cfg, potential)
    pop = result.population
    lw = pop.log_w
    w = np.exp(lw - lw.max())
    w /= w.sum()
    V = model.vocab_size
    lo = (n_blocks - 1) * block_size
    codes = np.zeros(pop.size, dtype=np.int64)
    for t in range(block_size):
        codes = codes * V + pop.tokens[:, lo + t]
    est = np.bincount(codes, w, V**block_size)
    return {"group": group, "rep": rep, "seed": run_cfg.seed, "marginal": est.tolist()}


def final_block_marginals(model, tables, run_config, potential, repetitions, seed=0, workers=1, group="run"):
    """Weighted final-block marginal estimates, one per repetition."""
    tasks = [(model, run_config.with_updates(seed=seed + r), potential, tables.n_blocks, tables.block_size, group, r)
             for r in range(repetitions)]
    return parallel_map(_marginal_rep, tasks, workers)


def bias_study(model, n_blocks, block_size, potentials, correction_modes=("heuristic", "auxiliary-corrected"),
               n_particles=256, repetitions=50, run_config=None, seed=0, workers=1):
    """Distance between estimated and exact final-block marginals per (mode, potential).

    ``potentials`` maps a label to a potential object (``None`` for plain
    weights).  Each record carries the total-variation distance of one
    repetition's estimate.
    """
    base = run_config or RunConfig()
    base = base.with_updates(block_size=block_size, max_tokens=n_blocks * block_size,
                             max_particles=n_particles, min_particles=n_particles, dynamic_allocation=False)
    tables = enumerate_power_target(model, None, n_blocks, block_size, base.alpha)
    exact = tables.block_marginal(n_blocks).probs
    records = []
    for mode in correction_modes:
        for label, pot in potentials.items():
            cfg = base.with_updates(correction_mode=mode, apf_mode=_apf_label(pot))
            group = f"{mode}/{label}"
            for rec in final_block_marginals(model, tables, cfg, pot, repetitions, seed, workers, group):
                rec["tv"] = total_variation(rec["marginal"], exact)
                records.append(rec)
    report = StudyReport(
        "bias",
        {"n_particles": n_particles, "repetitions": repetitions, "seed": seed, "run": base.to_dict(),
         "potentials": list(potentials), "correction_modes": list(correction_modes)},
        records,
        ["tv"],
    )
    report.summary = {
        "exact_final_block_marginal": exact.tolist(),
        "mean_tv": {g: a["tv"]["mean"] for g, a in report.aggregates.items()},
    }
    return report


def _apf_label(potential):
    if potential is None:
        return "none"
    if isinstance(potential, RolloutPotential):
        return "rollout"
    return "learned"


PLANTED_DEFAULTS = {
    "vocab": 3,
    "depth": 4,
    "trap_prob": 0.1,
    "mode_prob": 0.9,
    "temperature": 1.0,
    "kappa": 1.0,
    "eta": 0.5,
    "n_rollouts": 2,
    "alpha": 4.0,
}


def planted_setup(n_particles=16, **overrides):
    """Planted-mode model, base run config and rollout config used by the study."""
    s = dict(PLANTED_DEFAULTS, **overrides)
    unknown = set(s) - set(PLANTED_DEFAULTS)
    if unknown:
        raise ConfigurationError(f"unknown planted-study settings: {sorted(unknown)}")
    model = build_model(ToyModelSpec(kind="planted-mode", vocab=s["vocab"], depth=s["depth"],
                                     trap_prob=s["trap_prob"], mode_prob=s["mode_prob"]))
    cfg = RunConfig(alpha=s["alpha"], block_size=1, max_tokens=s["depth"] + 1, max_particles=n_particles,
                    min_particles=n_particles, proposal=ProposalConfig(s["temperature"]),
                    ess_threshold=s["kappa"], apf_strength=s["eta"])
    rollout = RolloutConfig(n_rollouts=s["n_rollouts"], horizon=s["depth"] + 1)
    return model, cfg, rollout


def train_planted_head(n_particles=16, collection_seeds=range(100000, 100300), train_seed=0, train_config=None,
                       **overrides):
    """Collect rollout supervision on the planted instance and fit a head.

    Collection seeds are disjoint from the study's repetition seeds.
    """
    from .value_head import collect_supervision, train

    model, cfg, rollout = planted_setup(n_particles, **overrides)
    data = collect_supervision(model, [()], cfg.with_updates(apf_mode="rollout"), rollout, seeds=collection_seeds)
    return train(data, train_config, train_seed)


def _planted_rep(task):
    model, run_cfg, potential, group, rep = task
    result = run_apps(model, None, run_cfg, potential)
    return {"group": group, "rep": rep, "seed": run_cfg.seed,
            "recovered": float(result.completion[0] == model.trap_token)}


def planted_mode_study(n_particles=16, repetitions=500, variants=("p-only", "rollout", "learned"), head=None,
                       seed=0, workers=1, **overrides):
    """How often each selection rule keeps the planted high-value branch.

    Summary fields give recovery rates, their standard errors and the
    z-scores of each variant against ``p-only``.
    """
    model, cfg, rollout = planted_setup(n_particles, **overrides)
    pots = {}
    for v in variants:
        if v == "p-only":
            pots[v] = None
        elif v == "rollout":
            pots[v] = RolloutPotential(rollout)
        elif v == "rollout-eta0":
            pots[v] = RolloutPotential(rollout)
        elif v == "learned":
            if head is None:
                head = train_planted_head(n_particles, **overrides).head
            pots[v] = LearnedPotential(head)
        else:
            raise ConfigurationError(f"unknown variant {v!r}")
    tasks = []
    for v, pot in pots.items():
        vcfg = cfg.with_updates(apf_mode=_apf_label(pot), apf_strength=0.0 if v == "rollout-eta0" else cfg.apf_strength)
        tasks.extend((model, vcfg.with_updates(seed=seed + r), pot, v, r) for r in range(repetitions))
    records = parallel_map(_planted_rep, tasks, workers)
    report = StudyReport(
        "planted",
        {"n_particles": n_particles, "repetitions": repetitions, "seed": seed, "variants": list(variants),
         "run": cfg.to_dict(), "settings": dict(PLANTED_DEFAULTS, **overrides)},
        records,
        ["recovered"],
    )
    report.summary = planted_summary(report)
    return report


def planted_summary(report):
    agg = report.aggregates
    out = {"rates": {v: agg[v]["recovered"]["mean"] for v in agg}, "se": {v: agg[v]["recovered"]["se"] for v in agg}}
    if "p-only" in agg:
        base = agg["p-only"]["recovered"]
        out["z_vs_p_only"] = {}
        for v, a in agg.items():
            if v == "p-only":
                continue
            se = math.hypot(a["recovered"]["se"], base["se"])
            diff = a["recovered"]["mean"] - base["mean"]
            out["z_vs_p_only"][v] = diff / se if se > 0 else (math.inf if diff > 0 else 0.0)
    return out


STUDIES = ("convergence", "bias", "planted")


def run_study(cfg, workers=None):
    """Dispatch the study described by ``cfg.study`` (key ``kind``)."""
    st = dict(cfg.study)
    kind = st.pop("kind", None)
    if kind not in STUDIES:
        raise ConfigurationError(f"study.kind must be one of {STUDIES}")
    workers = workers or cfg.workers
    seed = cfg.run.seed
    reps = int(st.pop("repetitions", cfg.repetitions))
    if kind == "planted":
        return planted_mode_study(int(st.pop("particles", 16)), reps, tuple(st.pop("variants", ("p-only", "rollout"))),
                                  seed=seed, workers=workers, **st)
    model = build_model(cfg.model)
    n_blocks = int(st.pop("blocks", 2))
    B = cfg.run.block_size
    if kind == "convergence":
        particles = [int(p) for p in np.atleast_1d(st.pop("particles", [16, 64, 256]))]
        fns = [BlockIndicator(1, tuple([0] * B), B), ConstantFunction(1.0)]
        report = convergence_study(model, n_blocks, B, particles, reps, fns, cfg.run, seed, workers)
    else:
        from .potentials import RandomPotential, UnitPotential

        pots = {"unit": UnitPotential(), "random": RandomPotential(seed, float(st.pop("scale", 1.0))),
                "rollout": RolloutPotential(cfg.rollout)}
        report = bias_study(model, n_blocks, B, pots, n_particles=int(st.pop("particles", 256)),
                            repetitions=reps, run_config=cfg.run, seed=seed, workers=workers)
    if st:
        raise ConfigurationError(f"unused study settings: {sorted(st)}")
    return report
