"""Offline diagonal Fisher estimation and the damped preconditioner.

The reference Fisher is estimated once, at the episode-start adapter state,
by sampling continuations from the model itself on a safe corpus and
averaging squared score entries; the preconditioner is the damped inverse
of that diagonal and is reused across every episode. Exact-Fisher
computation by full sequence enumeration is provided for verification on
models small enough to enumerate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .artifacts import decode_array, digest_obj, encode_array, read_json, write_json
from .genmodel import GenerationSettings

PRECOND_KIND = "preconditioner"
PRECOND_VERSION = 1

# Fisher sampling draws from the raw model distribution, not the shaped
# nucleus-sampling distribution used for story generation.
PLAIN_SETTINGS = GenerationSettings(temperature=1.0, top_p=1.0, tokens_per_segment=1)


class EstimationError(RuntimeError):
    pass


class DigestMismatchError(RuntimeError):
    """Preconditioner artifact does not belong to the model in hand."""


class KahanSum:
    """Compensated vector accumulator; fixed-order sums stay reproducible."""

    def __init__(self, n: int):
        self.total = np.zeros(n)
        self._carry = np.zeros(n)

    def add(self, x: np.ndarray) -> None:
        y = x - self._carry
        t = self.total + y
        self._carry = (t - self.total) - y
        self.total = t


def _encode_context(model, item):
    if isinstance(item, str):
        return model.vocab.encode(item)
    return [int(t) for t in item]


def corpus_digest(corpus) -> str:
    return digest_obj([item if isinstance(item, str) else list(map(int, item))
                       for item in corpus])


@dataclass
class FisherDiagEstimate:
    diag: np.ndarray
    sample_count: int
    n_steps: int
    batch_size: int
    continuation_tokens: int
    corpus_digest: str
    model_digest: str
    seed: int
    empirical: bool = False


def estimate_diag_fisher(model, corpus, n_steps: int = 10, batch_size: int = 2,
                         seed: int = 0, continuation_tokens: int = 128,
                         empirical: bool = False) -> FisherDiagEstimate:
    """Running mean of squared per-parameter scores over sampled batches.

    For each of `n_steps` steps a batch of contexts is drawn from the corpus
    and a continuation is sampled from the model at its current (episode
    start) state; the squared gradient of the continuation's log-likelihood
    is accumulated entrywise with compensated summation. `empirical=True`
    switches to the empirical-Fisher ablation: corpus items become the
    targets themselves (empty context) instead of sampled continuations.

    Each step draws from its own child stream of `seed` in a fixed order, so
    the result is byte-stable no matter how steps are scheduled.
    """
    corpus = list(corpus)
    if not corpus:
        raise EstimationError("cannot estimate Fisher on an empty corpus")
    if n_steps < 1 or batch_size < 1:
        raise EstimationError("n_steps and batch_size must be >= 1")

    acc = KahanSum(model.param_count)
    count = 0
    children = np.random.SeedSequence(seed).spawn(n_steps)
    settings = GenerationSettings(temperature=1.0, top_p=1.0,
                                  tokens_per_segment=continuation_tokens)
    for step in range(n_steps):
        rng = np.random.default_rng(children[step])
        picks = rng.integers(0, len(corpus), size=batch_size)
        for pick in picks:
            item = corpus[int(pick)]
            if empirical:
                target = _encode_context(model, item)[:continuation_tokens]
                if not target:
                    continue
                context = []
            else:
                context = _encode_context(model, item)
                target = model.sample_segment(context, settings, rng)
            score = -model.adapter_gradient([(context, target)])
            acc.add(score * score)
            count += 1
    if count == 0:
        raise EstimationError("no usable samples in corpus")
    return FisherDiagEstimate(
        diag=acc.total / count,
        sample_count=count,
        n_steps=n_steps,
        batch_size=batch_size,
        continuation_tokens=continuation_tokens,
        corpus_digest=corpus_digest(corpus),
        model_digest=model.model_digest(),
        seed=seed,
        empirical=empirical,
    )


@dataclass
class Preconditioner:
    diag: np.ndarray
    damping: float
    fisher_diag: np.ndarray
    meta: dict

    @property
    def n(self) -> int:
        return self.diag.size

    def save(self, path) -> None:
        write_json(path, {
            "kind": PRECOND_KIND,
            "format_version": PRECOND_VERSION,
            "n": self.n,
            "damping": self.damping,
            "diag": encode_array(self.diag),
            "fisher_diag": encode_array(self.fisher_diag),
            **self.meta,
        })

    @classmethod
    def load(cls, path, model=None) -> "Preconditioner":
        d = read_json(path)
        if d.get("kind") != PRECOND_KIND:
            raise ValueError(f"{path}: not a preconditioner artifact")
        if d.get("format_version") != PRECOND_VERSION:
            raise ValueError(f"{path}: unsupported format version")
        meta = {k: v for k, v in d.items()
                if k not in ("kind", "format_version", "n", "damping", "diag", "fisher_diag")}
        pre = cls(diag=decode_array(d["diag"]), damping=d["damping"],
                  fisher_diag=decode_array(d["fisher_diag"]), meta=meta)
        if pre.diag.size != d["n"]:
            raise ValueError(f"{path}: stored n={d['n']} but diagonal has {pre.diag.size}")
        if model is not None:
            if meta.get("model_digest") != model.model_digest():
                raise DigestMismatchError(
                    f"{path}: preconditioner was built for a different model")
            if pre.n != model.param_count:
                raise DigestMismatchError(
                    f"{path}: n={pre.n} != model parameter count {model.param_count}")
        return pre


def build_preconditioner(estimate: FisherDiagEstimate,
                         damping: float = 1e-4) -> Preconditioner:
    """P_i = 1 / (fisher_i + damping); entries lie in (0, 1/damping]."""
    if damping <= 0:
        raise ValueError("damping must be > 0")
    if np.any(estimate.diag < 0):
        raise ValueError("fisher diagonal must be non-negative")
    return Preconditioner(
        diag=1.0 / (estimate.diag + damping),
        damping=damping,
        fisher_diag=estimate.diag.copy(),
        meta={
            "n_steps": estimate.n_steps,
            "batch_size": estimate.batch_size,
            "sample_count": estimate.sample_count,
            "continuation_tokens": estimate.continuation_tokens,
            "corpus_digest": estimate.corpus_digest,
            "model_digest": estimate.model_digest,
            "seed": estimate.seed,
            "empirical": estimate.empirical,
        },
    )


# -- exact Fisher by enumeration (verification only) ---------------------------


def _enumerate_scores(model, context, length, budget):
    """Depth-first walk over all |V|^length continuations of `context`.

    Yields (probability, score vector) per complete sequence. Scores are
    accumulated along the path, so each edge's gradient is computed once.
    """
    vsize = len(model.vocab)
    if vsize ** length > budget:
        raise EstimationError(
            f"enumeration budget exceeded: {vsize}^{length} > {budget}")

    grad_cache: dict = {}
    window = getattr(getattr(model, "fmap", None), "context_window", None)

    def edge(ctx, y):
        hist = list(ctx[-window:]) if window is not None else list(ctx)
        key = (tuple(hist), y)
        hit = grad_cache.get(key)
        if hit is None:
            logp = float(model.next_token_logprobs(hist)[y])
            score = -model.adapter_gradient([(hist, [y])])
            hit = (logp, score)
            grad_cache[key] = hit
        return hit

    ctx = list(context)

    def walk(depth, logp, score):
        if depth == length:
            yield math.exp(logp), score
            return
        for y in range(vsize):
            lp, sc = edge(ctx, y)
            ctx.append(y)
            yield from walk(depth + 1, logp + lp, score + sc)
            ctx.pop()

    yield from walk(0, 0.0, np.zeros(model.param_count))


def exact_fisher_diag(model, contexts, length: int, budget: int = 10 ** 6,
                      per_context: bool = False) -> np.ndarray:
    """Exact diagonal Fisher for length-`length` continuations.

    Returns the mean over contexts, or the (n_contexts, n) per-context array
    when `per_context` is set. Computed as the exact variance of the score,
    Var[grad log p], via full enumeration.
    """
    rows = []
    for item in contexts:
        ctx = _encode_context(model, item)
        mean = KahanSum(model.param_count)
        mean_sq = KahanSum(model.param_count)
        for p, score in _enumerate_scores(model, ctx, length, budget):
            mean.add(p * score)
            mean_sq.add(p * score * score)
        rows.append(mean_sq.total - mean.total ** 2)
    out = np.array(rows)
    if per_context:
        return out
    return out.mean(axis=0)


def exact_fisher_full(model, context, length: int, budget: int = 10 ** 5) -> np.ndarray:
    """Exact full Fisher matrix (covariance of the score) for one context."""
    ctx = _encode_context(model, context)
    n = model.param_count
    mean = np.zeros(n)
    second = np.zeros((n, n))
    for p, score in _enumerate_scores(model, ctx, length, budget):
        mean += p * score
        second += p * np.outer(score, score)
    return second - np.outer(mean, mean)


@dataclass
class StabilityReport:
    ok: bool
    fraction_ok: float
    worst_ratio_high: float
    worst_ratio_low: float
    violations: list


def check_fisher_stability(reference_diag: np.ndarray, per_context_diag: np.ndarray,
                           rho: float, required_fraction: float = 0.9,
                           zero_tol: float = 1e-15) -> StabilityReport:
    """Entrywise band check: (1-rho)*ref <= I(x) <= (1+rho)*ref per context.

    Entries where both sides are zero (below zero_tol) count as satisfied.
    Reports the fraction of contexts fully inside the band and the worst
    entrywise ratios observed over entries with a nonzero reference.
    """
    ref = np.asarray(reference_diag, dtype=np.float64)
    ctxs = np.atleast_2d(np.asarray(per_context_diag, dtype=np.float64))
    lo, hi = (1.0 - rho) * ref, (1.0 + rho) * ref
    ref_zero = ref <= zero_tol

    ok_rows = []
    violations = []
    worst_high, worst_low = 0.0, math.inf
    for i, row in enumerate(ctxs):
        row_zero = row <= zero_tol
        both_zero = ref_zero & row_zero
        ok_entry = both_zero | ((row >= lo - zero_tol) & (row <= hi + zero_tol))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(ref_zero, np.where(row_zero, 1.0, math.inf), row / ref)
        worst_high = max(worst_high, float(np.max(ratios)))
        worst_low = min(worst_low, float(np.min(ratios)))
        row_ok = bool(np.all(ok_entry))
        ok_rows.append(row_ok)
        if not row_ok:
            bad = int(np.argmax(~ok_entry))
            violations.append({"context": i, "entry": bad,
                               "ratio": float(ratios[bad])})
    fraction = float(np.mean(ok_rows)) if ok_rows else 1.0
    return StabilityReport(ok=fraction >= required_fraction, fraction_ok=fraction,
                           worst_ratio_high=worst_high, worst_ratio_low=worst_low,
                           violations=violations)
