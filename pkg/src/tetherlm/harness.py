"""Experiment driver: corpus preparation, training, decoding sweeps,
metric evaluation, diagnostics, and report emission.

A run is specified by a single JSON (or TOML, on Python 3.11+) document
and is deterministic given its seeds: every decode derives its generator
from (seed, method, k, prompt index), so reruns produce byte-identical
reports.
"""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines, budget as budget_mod, corpus as corpus_mod, fusion, metrics as metrics_mod
from .bpe import Tokenizer, train_bpe
from .bytelevel import byte_anchored_decode, byte_prompt_llrs, token_alphabet
from .decode import (
    COLD_START,
    DEBT_AVERAGE,
    DEBT_NONE,
    DEBT_TOP_N,
    KL,
    NO_OPT,
    PROJECT,
    RENYI,
    AnchorConfig,
    DecodeTrace,
    anchored_decode,
)
from .lm import EOS, DecodeParams, Distribution, NgramModel, apply_processors, next_dist, sample, train_ngram
from .metrics import CopyingReport, MetricsConfig, METRIC_NAMES, mean_metrics, report as make_report, utility_proxy


class SpecError(ValueError):
    """The experiment specification is invalid or incomplete."""


class TraceInvariantError(RuntimeError):
    """A decode trace violated its method's budget invariant."""


BUDGETED_METHODS = ("anchored", "renyi", "no_opt", "cold_start", "no_debt", "avg_debt", "fixed", "global", "anchored_byte")
REFERENCE_METHODS = ("safe", "risky")
BASELINE_METHODS = ("memfree", "rcad", "cpfuse", "tokenswap")
ALL_METHODS = REFERENCE_METHODS + BUDGETED_METHODS + BASELINE_METHODS


@dataclass(frozen=True)
class ExperimentSpec:
    """Inputs, model settings, method grid, and output location."""

    protected_path: str
    open_path: str
    heldout_path: str
    out_dir: str
    prompts_path: str = ""  # held-out prompt documents; heldout_path if empty
    methods: tuple[str, ...] = ("safe", "risky", "anchored")
    k_grid: tuple[float, ...] = (0.1, 0.5, 1.0, 2.0, 5.0, 20.0)
    seeds: tuple[int, ...] = (0, 1, 2)
    mode: str = corpus_mod.CHAR
    order: int = 5
    safe_order: int = 0  # 0 means same as order; smaller gives a weaker anchor
    smoothing: float = 0.01
    utility_order: int = 5
    protected_reps: int = 50
    t_max: int = 200
    byte_max_factor: int = 4
    bpe_merges: int = 40
    debt_window: int = 5
    temperature: float = 0.7
    repetition_penalty: float = 1.1
    prompt_len: int = 100
    ref_len: int = 200
    prompts_per_passage: int = 3
    memfree_n: int = 5
    rcad_alpha: float = 0.5
    byte_debt_scale: float = 4.0
    write_traces: bool = True

    def validate(self) -> None:
        for m in self.methods:
            if m not in ALL_METHODS:
                raise SpecError(f"unknown method {m!r}; known: {ALL_METHODS}")
        if self.mode not in (corpus_mod.CHAR, corpus_mod.WORD, "byte"):
            raise SpecError(f"unknown mode {self.mode!r}")
        if not self.k_grid and any(m in BUDGETED_METHODS for m in self.methods):
            raise SpecError("budgeted methods need a non-empty k_grid")
        if self.t_max < 1 or self.order < 1:
            raise SpecError("t_max and order must be >= 1")
        paths = [self.protected_path, self.open_path, self.heldout_path]
        if self.prompts_path:
            paths.append(self.prompts_path)
        for p in paths:
            if not Path(p).exists():
                raise SpecError(f"corpus file missing: {p}")

    @classmethod
    def from_file(cls, path: str) -> "ExperimentSpec":
        text = Path(path).read_text(encoding="utf-8")
        if str(path).endswith(".toml"):
            try:
                import tomllib
            except ModuleNotFoundError as exc:
                raise SpecError("TOML specs need Python 3.11+; use JSON") from exc
            doc = tomllib.loads(text)
        else:
            doc = json.loads(text)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise SpecError(f"unknown spec fields: {sorted(unknown)}")
        for key in ("methods", "k_grid", "seeds"):
            if key in doc:
                doc[key] = tuple(doc[key])
        try:
            spec = cls(**doc)
        except TypeError as exc:
            raise SpecError(str(exc)) from None
        spec.validate()
        return spec


@dataclass
class Prompt:
    domain: str  # "protected" | "heldout"
    text: str
    reference: str
    source: str  # full source document, the RCAD context


@dataclass
class RunContext:
    """Everything trained or derived once per run."""

    spec: ExperimentSpec
    alphabet: object
    risky: NgramModel
    safe: NgramModel
    utility: NgramModel
    prompts: list[Prompt]
    heldout_prompts: list[Prompt]
    blocklist: baselines.Blocklist
    seed_indices: list[int]
    tokenizer: Tokenizer | None = None
    risky_bytes: NgramModel | None = None
    safe_bytes: NgramModel | None = None


def _windows(passage: str, spec: ExperimentSpec, mode: str) -> list[tuple[str, str]]:
    """(prompt, reference) pairs from the opening region of a passage."""
    if mode == corpus_mod.WORD:
        toks = passage.split()
        join = " "
    else:
        toks = list(passage)
        join = ""
    out = []
    stride = max(spec.prompt_len // 3, 1)
    for j in range(spec.prompts_per_passage):
        off = j * stride
        prompt = toks[off:off + spec.prompt_len]
        ref = toks[off + spec.prompt_len:off + spec.prompt_len + spec.ref_len]
        if len(prompt) == spec.prompt_len and len(ref) >= spec.ref_len // 2:
            out.append((join.join(prompt), join.join(ref)))
    return out


def prepare(spec: ExperimentSpec) -> RunContext:
    """Load corpora, train the three models, and build prompt sets.

    The protected passages enter only the risky training set; the safe
    and utility models never see them.
    """
    spec.validate()
    protected = corpus_mod.load_documents([spec.protected_path], newline_delimited=True)
    open_docs = corpus_mod.load_documents([spec.open_path], newline_delimited=True)
    heldout = corpus_mod.load_documents([spec.heldout_path], newline_delimited=True)
    prompt_docs = heldout
    if spec.prompts_path:
        prompt_docs = corpus_mod.load_documents([spec.prompts_path], newline_delimited=True)
    if not protected or not open_docs or not heldout:
        raise SpecError("all three corpora must be non-empty")

    mode = corpus_mod.CHAR if spec.mode == "byte" else spec.mode
    alphabet = corpus_mod.build_alphabet(protected + open_docs + heldout + prompt_docs, mode)
    risky_docs = open_docs + protected * spec.protected_reps
    risky = train_ngram(corpus_mod.corpus_sequences(risky_docs, mode), spec.order, spec.smoothing, alphabet)
    safe_order = spec.safe_order or spec.order
    safe = train_ngram(corpus_mod.corpus_sequences(open_docs, mode), safe_order, spec.smoothing, alphabet)
    utility = train_ngram(corpus_mod.corpus_sequences(heldout, mode), spec.utility_order, spec.smoothing, alphabet)

    prompts = [
        Prompt("protected", p, r, passage)
        for passage in protected
        for p, r in _windows(passage, spec, mode)
    ]
    heldout_prompts = [
        Prompt("heldout", p, r, doc)
        for doc in prompt_docs
        for p, r in _windows(doc, spec, mode)[:1]
    ]
    if not prompts:
        raise SpecError("no prompts could be built; passages shorter than prompt_len + ref_len/2")

    blocklist = baselines.build_blocklist(
        [corpus_mod.tokenize(p, mode) for p in protected], spec.memfree_n
    )
    seed_words = baselines.load_seed_words() if mode == corpus_mod.WORD else []
    seed_indices = baselines.seed_indices_for(alphabet, seed_words)

    ctx = RunContext(spec, alphabet, risky, safe, utility, prompts, heldout_prompts, blocklist, seed_indices)
    if spec.mode == "byte":
        ctx.tokenizer = train_bpe([d.encode() for d in open_docs], spec.bpe_merges)
        talpha = token_alphabet(ctx.tokenizer)
        risky_tok = [ctx.tokenizer.encode(d.encode()) + [ctx.tokenizer.eos_id] for d in risky_docs]
        safe_tok = [ctx.tokenizer.encode(d.encode()) + [ctx.tokenizer.eos_id] for d in open_docs]
        ctx.risky_bytes = train_ngram(risky_tok, spec.order, spec.smoothing, talpha)
        ctx.safe_bytes = train_ngram(safe_tok, spec.order, spec.smoothing, talpha)
    return ctx


def _method_config(ctx: RunContext, method: str, k: float) -> AnchorConfig:
    spec = ctx.spec
    params = DecodeParams(spec.temperature, spec.repetition_penalty, spec.t_max, 0)
    base = dict(
        k=k,
        t_max=spec.t_max,
        debt_window=spec.debt_window,
        decode_params=params,
        byte_debt_scale=spec.byte_debt_scale,
    )
    if method == "anchored":
        return AnchorConfig(**base)
    if method == "renyi":
        return AnchorConfig(**base, divergence=RENYI)
    if method == "no_opt":
        return AnchorConfig(**base, opt_mode=NO_OPT)
    if method == "cold_start":
        return AnchorConfig(**base, opt_mode=COLD_START)
    if method == "no_debt":
        return AnchorConfig(**base, debt_mode=DEBT_NONE)
    if method == "avg_debt":
        return AnchorConfig(**base, debt_mode=DEBT_AVERAGE)
    if method == "fixed":
        return AnchorConfig(**base, schedule=budget_mod.FIXED)
    if method == "global":
        return AnchorConfig(**base, schedule=budget_mod.GLOBAL)
    if method == "anchored_byte":
        base["t_max"] = spec.t_max * spec.byte_max_factor
        return AnchorConfig(**base)
    raise SpecError(f"method {method!r} takes no budget configuration")


def _single_model_decode(model, prompt_syms, params, rng, alphabet):
    ids = list(alphabet.encode(prompt_syms))
    out = []
    for _ in range(params.max_steps):
        dist = apply_processors(Distribution(model.next_log_probs(ids)), ids, params)
        idx = sample(dist, rng)
        ids.append(idx)
        if idx == alphabet.eos_index:
            break
        out.append(alphabet.symbols[idx])
    return out


def _two_model_baseline_decode(method, ctx, prompt: Prompt, params, rng):
    alphabet = ctx.alphabet
    ids = list(alphabet.encode(corpus_mod.tokenize(prompt.text, _token_mode(ctx))))
    state = baselines.CpFuseState()
    out = []
    for _ in range(params.max_steps):
        pr = apply_processors(Distribution(ctx.risky.next_log_probs(ids)), ids, params)
        ps = apply_processors(Distribution(ctx.safe.next_log_probs(ids)), ids, params)
        if method == "cpfuse":
            dist, state = baselines.cpfuse_step(pr, ps, state)
        else:  # tokenswap
            dist = baselines.tokenswap_dist(pr, ps, ctx.seed_indices)
        idx = sample(dist, rng)
        if method == "cpfuse":
            state = baselines.cpfuse_advance(state, pr, ps, idx)
        ids.append(idx)
        if idx == alphabet.eos_index:
            break
        out.append(alphabet.symbols[idx])
    return out


def _token_mode(ctx: RunContext) -> str:
    return corpus_mod.CHAR if ctx.spec.mode == "byte" else ctx.spec.mode


def _detokenize(symbols: Sequence[str], mode: str) -> str:
    return " ".join(symbols) if mode == corpus_mod.WORD else "".join(symbols)


def _rng_for(seed: int, method: str, k: float | None, prompt_idx: int) -> np.random.Generator:
    k_part = 0 if k is None else int(round(k * 1_000_000))
    method_part = zlib.crc32(method.encode())  # process-stable, unlike hash()
    return np.random.default_rng([seed, prompt_idx, k_part, method_part])


def decode_one(ctx: RunContext, method: str, k: float | None, seed: int, prompt_idx: int):
    """Run one decode; returns (generation text, trace or None)."""
    spec = ctx.spec
    prompt = ctx.prompts[prompt_idx]
    mode = _token_mode(ctx)
    params = DecodeParams(spec.temperature, spec.repetition_penalty, spec.t_max, seed)
    rng = _rng_for(seed, method, k, prompt_idx)
    prompt_syms = corpus_mod.tokenize(prompt.text, mode)

    if method in ("safe", "risky"):
        model = ctx.safe if method == "safe" else ctx.risky
        out = _single_model_decode(model, prompt_syms, params, rng, ctx.alphabet)
        return _detokenize(out, mode), None
    if method == "memfree":
        res = baselines.memfree_decode(ctx.risky, ctx.blocklist, prompt_syms, params, rng)
        return _detokenize(res.generation, mode), None
    if method == "rcad":
        out = _rcad_decode(ctx, prompt, params, rng)
        return _detokenize(out, mode), None
    if method in ("cpfuse", "tokenswap"):
        out = _two_model_baseline_decode(method, ctx, prompt, params, rng)
        return _detokenize(out, mode), None

    config = _method_config(ctx, method, float(k))
    if method == "anchored_byte":
        data, trace = byte_anchored_decode(
            ctx.risky_bytes, ctx.tokenizer, ctx.safe_bytes, ctx.tokenizer,
            prompt.text.encode(), config, rng,
        )
        _assert_trace_invariant(method, config, trace)
        return data.decode(errors="replace"), trace
    decoder = anchored_decode
    gen, trace = decoder(ctx.risky, ctx.safe, prompt_syms, config, rng)
    _assert_trace_invariant(method, config, trace)
    return _detokenize(gen, mode), trace


def _rcad_decode(ctx, prompt: Prompt, params, rng):
    mode = _token_mode(ctx)
    alphabet = ctx.alphabet
    context_syms = corpus_mod.tokenize(prompt.source, mode)
    prompt_syms = corpus_mod.tokenize(prompt.text, mode)
    history: list[str] = []
    out = []
    for _ in range(params.max_steps):
        dist = baselines.rcad_dist(ctx.risky, prompt_syms, context_syms, ctx.spec.rcad_alpha, history)
        ids = alphabet.encode(list(prompt_syms) + history)
        dist = apply_processors(dist, ids, params)
        idx = sample(dist, rng)
        if idx == alphabet.eos_index:
            break
        history.append(alphabet.symbols[idx])
        out.append(alphabet.symbols[idx])
    return out


def _assert_trace_invariant(method: str, config: AnchorConfig, trace: DecodeTrace) -> None:
    """Re-assert the budget bound a finished trace must satisfy."""
    if config.opt_mode == COLD_START:
        return  # no guarantee by construction
    tol = 1e-8
    if config.schedule == budget_mod.ADAPTIVE:
        running = 0.0
        for step in trace.steps:
            running += step.spent
            bound = max(0.0, (step.t + 1) * config.k - trace.delta_init)
            if running > bound + tol:
                raise TraceInvariantError(
                    f"{method}: spend {running} exceeds {bound} at step {step.t}"
                )
    elif config.schedule == budget_mod.FIXED:
        if any(s.spent > config.k + tol for s in trace.steps):
            raise TraceInvariantError(f"{method}: a step exceeded the fixed cap")
        if trace.total_spent > config.K + tol:
            raise TraceInvariantError(f"{method}: total exceeds K under fixed schedule")
    elif config.schedule == budget_mod.GLOBAL:
        if trace.total_spent > config.K + tol:
            raise TraceInvariantError(f"{method}: total exceeds K under global schedule")


def _config_label(method: str, k: float | None) -> str:
    return method if k is None else f"{method}@k={k:g}"


def run_experiment(spec: ExperimentSpec) -> Path:
    """Train, decode every (method, k, seed, prompt), evaluate, write reports."""
    ctx = prepare(spec)
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    decode_records = run_sweep(ctx, out_dir)
    summary = evaluate(ctx, decode_records)
    write_reports(ctx, summary, out_dir)
    bundle = diagnostics(ctx)
    (out_dir / "diagnostics.json").write_text(json.dumps(bundle, indent=1, sort_keys=True))
    return out_dir


def _configurations(spec: ExperimentSpec) -> list[tuple[str, float | None]]:
    configs: list[tuple[str, float | None]] = []
    for method in spec.methods:
        if method in BUDGETED_METHODS:
            configs.extend((method, k) for k in spec.k_grid)
        else:
            configs.append((method, None))
    return configs


def run_sweep(ctx: RunContext, out_dir: Path) -> list[dict]:
    """Decode the full grid; returns index records and writes trace files."""
    spec = ctx.spec
    trace_dir = out_dir / "traces"
    if spec.write_traces:
        trace_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for method, k in _configurations(spec):
        for seed in spec.seeds:
            for p_idx in range(len(ctx.prompts)):
                text, trace = decode_one(ctx, method, k, seed, p_idx)
                rec = {
                    "method": method,
                    "k": k,
                    "seed": seed,
                    "prompt": p_idx,
                    "label": _config_label(method, k),
                    "text": text,
                    "delta_init": None if trace is None else trace.delta_init,
                    "total_spent": None if trace is None else trace.total_spent,
                    "terminated_by": None if trace is None else trace.terminated_by,
                }
                if trace is not None and spec.write_traces:
                    name = f"{method}__k{0 if k is None else k:g}__s{seed}__p{p_idx}.jsonl"
                    (trace_dir / name).write_text(trace.to_jsonl())
                    rec["trace_file"] = f"traces/{name}"
                records.append(rec)
    with open(out_dir / "decodes.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return records


def evaluate(ctx: RunContext, records: list[dict]) -> list[CopyingReport]:
    """Copying metrics per configuration, NCR against the two references."""
    spec = ctx.spec
    mode = _token_mode(ctx)
    mcfg = MetricsConfig()
    by_label: dict[str, list[dict]] = {}
    for rec in records:
        by_label.setdefault(rec["label"], []).append(rec)
    if "risky" not in by_label or "safe" not in by_label:
        raise SpecError("NCR needs both reference methods 'risky' and 'safe' in the sweep")

    def config_metrics(recs: list[dict]) -> dict[str, float]:
        pairs = [(r["text"], ctx.prompts[r["prompt"]].reference) for r in recs]
        return mean_metrics(pairs, mcfg)

    def config_utility(recs: list[dict]) -> float:
        gens = [corpus_mod.tokenize(r["text"], mode) for r in recs if r["text"]]
        return utility_proxy(gens, ctx.utility)

    risky_m = config_metrics(by_label["risky"])
    safe_m = config_metrics(by_label["safe"])
    reports = []
    for label in by_label:
        m = config_metrics(by_label[label])
        reports.append(make_report(label, m, risky_m, safe_m, config_utility(by_label[label])))
    return reports


def write_reports(ctx: RunContext, reports: list[CopyingReport], out_dir: Path) -> None:
    summary = {
        "spec": asdict(ctx.spec),
        "n_prompts": len(ctx.prompts),
        "reports": {r.label: r.to_dict() for r in sorted(reports, key=lambda r: r.label)},
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    with open(out_dir / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["configuration", "metric", "value", "ncr"])
        for rep in sorted(reports, key=lambda r: r.label):
            for name in METRIC_NAMES:
                ncr_val = rep.ncr_per_metric[name]
                writer.writerow([rep.label, name, repr(rep.metrics[name]), "" if ncr_val is None else repr(ncr_val)])
            writer.writerow([rep.label, "ncr_mean", "" if rep.ncr_mean is None else repr(rep.ncr_mean), ""])
            writer.writerow([rep.label, "utility_nll", "" if rep.utility is None else repr(rep.utility), ""])


def load_summary(out_dir: str | Path) -> dict:
    return json.loads((Path(out_dir) / "summary.json").read_text())


def diagnostics(ctx: RunContext, steps: int = 50, seed: int = 0) -> dict:
    """Per-step divergence samples, prefix LLRs, debts, and copy starts.

    Rolls the risky model for `steps` steps on each prompt of both
    domains, recording the per-step KL(p_r || p_s) diagnostic, and scans
    risky generations for where copying begins.
    """
    spec = ctx.spec
    mode = _token_mode(ctx)
    params = DecodeParams(spec.temperature, spec.repetition_penalty, steps, seed)
    out: dict = {"domains": {}}
    for domain, prompts in (("protected", ctx.prompts), ("heldout", ctx.heldout_prompts)):
        kl_samples: list[float] = []
        llrs: list[float] = []
        debts: list[float] = []
        lcs_starts: list[int] = []
        acs_starts: list[int] = []
        for i, prompt in enumerate(prompts):
            syms = corpus_mod.tokenize(prompt.text, mode)
            rng = _rng_for(seed, f"diag-{domain}", None, i)
            ids = list(ctx.alphabet.encode(syms))
            gen: list[str] = []
            for _ in range(steps):
                pr = apply_processors(Distribution(ctx.risky.next_log_probs(ids)), ids, params)
                ps = apply_processors(Distribution(ctx.safe.next_log_probs(ids)), ids, params)
                kl_samples.append(fusion.kl(pr, ps))
                idx = sample(pr, rng)
                ids.append(idx)
                if idx == ctx.alphabet.eos_index:
                    break
                gen.append(ctx.alphabet.symbols[idx])
            rep = budget_mod.prefix_debt(ctx.risky, ctx.safe, syms, spec.debt_window, specials={EOS})
            debts.append(rep.delta_init)
            llrs.extend(float(x) for x in rep.llrs if not math.isnan(x))
            hyp = metrics_mod.normalize(_detokenize(gen, mode))
            ref = metrics_mod.normalize(prompt.reference)
            length, start = metrics_mod._longest_span(hyp, ref, np.zeros(len(hyp), dtype=bool))
            if length >= 1:
                lcs_starts.append(start)
            acs_start = _first_acs_start(hyp, ref, MetricsConfig().acs_min_len)
            if acs_start is not None:
                acs_starts.append(acs_start)
        kl_arr = np.array(kl_samples) if kl_samples else np.zeros(1)
        out["domains"][domain] = {
            "per_step_kl": [float(x) for x in kl_samples],
            "kl_q90": float(np.quantile(kl_arr, 0.9)),
            "prefix_llrs": llrs,
            "delta_init": debts,
            "delta_init_mean": float(np.mean(debts)) if debts else 0.0,
            "lcs_start_positions": lcs_starts,
            "acs_start_positions": acs_starts,
        }
    return out


def _first_acs_start(hyp, ref, min_len: int) -> int | None:
    blocked = np.zeros(len(hyp), dtype=bool)
    starts = []
    while True:
        length, start = metrics_mod._longest_span(list(hyp), list(ref), blocked)
        if length < min_len:
            break
        starts.append(start)
        blocked[start:start + length] = True
    return min(starts) if starts else None
