"""Linear interpolation of per-hypothesis signals, derivative-free weight
tuning against corpus WER, and the rescore/rewrite threshold grid search.

Each candidate row carries four signals: acoustic log-likelihood, first-pass
LM log-likelihood, rescorer log-probability, and the generative
log-likelihood of a rewrite-injected candidate (zero on ordinary rows, with
the ASR-provided scores zeroed on injected rows). Weights are learned with
Powell's direction-set method and Brent line searches, which needs no
derivatives and therefore tolerates the piecewise-constant WER objective.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import model
from .errors import InputError, ParseError, UsageError
from .metrics import corpus_wer

SIGNAL_NAMES = ("acoustic_logp", "firstpass_lm_logp", "rescorer_logp", "lm_cost_plus")


def _as_vector(v, what: str) -> np.ndarray:
    if isinstance(v, (SignalVector, WeightVector)):
        return v.as_array()
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (len(SIGNAL_NAMES),):
        raise UsageError(f"{what}: expected {len(SIGNAL_NAMES)} components, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class SignalVector:
    acoustic_logp: float
    firstpass_lm_logp: float
    rescorer_logp: float
    lm_cost_plus: float = 0.0

    def __post_init__(self):
        for name in SIGNAL_NAMES:
            if not math.isfinite(getattr(self, name)):
                raise InputError(f"SignalVector: {name} is not finite")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in SIGNAL_NAMES])


@dataclass(frozen=True)
class WeightVector:
    acoustic_logp: float = 1.0
    firstpass_lm_logp: float = 0.0
    rescorer_logp: float = 0.0
    lm_cost_plus: float = 0.0

    def __post_init__(self):
        for name in SIGNAL_NAMES:
            if not math.isfinite(getattr(self, name)):
                raise InputError(f"WeightVector: {name} is not finite")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in SIGNAL_NAMES])

    @classmethod
    def from_array(cls, arr) -> "WeightVector":
        arr = _as_vector(arr, "WeightVector.from_array")
        return cls(**dict(zip(SIGNAL_NAMES, map(float, arr))))


ASR_WEIGHTS = WeightVector(1.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class CandidateRow:
    """One selectable hypothesis: its words plus the four signals."""

    words: tuple
    signals: SignalVector
    injected: bool = False


@dataclass
class SignalRecord:
    query_id: str
    reference: tuple
    rows: list
    domain: str = ""


def make_rewrite_row(words, generative_logp: float) -> CandidateRow:
    """Rewrite-injected candidate: ASR signals zeroed, lm_cost_plus set."""
    return CandidateRow(words=tuple(words), injected=True,
                        signals=SignalVector(0.0, 0.0, 0.0, float(generative_logp)))


def combine(signals, weights) -> float:
    """Linear score w . s."""
    return float(_as_vector(signals, "combine: signals")
                 @ _as_vector(weights, "combine: weights"))


def select(rows, weights) -> int:
    """Index of the best-scoring row; ties go to the earlier (ASR rank) row."""
    rows = rows.rows if isinstance(rows, SignalRecord) else rows
    if not rows:
        raise InputError("select: record has no candidate rows")
    w = _as_vector(weights, "select: weights")
    best, best_score = 0, -math.inf
    for i, row in enumerate(rows):
        score = float(row.signals.as_array() @ w)
        if score > best_score:
            best, best_score = i, score
    return best


# ---------------------------------------------------------------------------
# Powell's method with Brent line searches

_GOLD = 1.6180339887498949
_CGOLD = 0.3819660112501051
_TINY = 1e-20


def _bracket(g, xa=0.0, xb=1.0, grow_limit=100.0):
    """Expand downhill from (xa, xb) until a minimum is bracketed."""
    fa, fb = g(xa), g(xb)
    if fb > fa:
        xa, xb, fa, fb = xb, xa, fb, fa
    xc = xb + _GOLD * (xb - xa)
    fc = g(xc)
    while fb > fc:
        r = (xb - xa) * (fb - fc)
        q = (xb - xc) * (fb - fa)
        denom = 2.0 * math.copysign(max(abs(q - r), _TINY), q - r)
        u = xb - ((xb - xc) * q - (xb - xa) * r) / denom
        ulim = xb + grow_limit * (xc - xb)
        if (xb - u) * (u - xc) > 0.0:
            fu = g(u)
            if fu < fc:
                return (xb, u, xc) if xb < xc else (xc, u, xb)
            if fu > fb:
                return (xa, xb, u) if xa < u else (u, xb, xa)
            u = xc + _GOLD * (xc - xb)
            fu = g(u)
        elif (xc - u) * (u - ulim) > 0.0:
            fu = g(u)
            if fu < fc:
                xb, xc, u = xc, u, u + _GOLD * (u - xc)
                fb, fc, fu = fc, fu, g(u)
        elif (u - ulim) * (ulim - xc) >= 0.0:
            u = ulim
            fu = g(u)
        else:
            u = xc + _GOLD * (xc - xb)
            fu = g(u)
        xa, xb, xc = xb, xc, u
        fa, fb, fc = fb, fc, fu
    return (xa, xb, xc) if xa < xc else (xc, xb, xa)


def _brent(g, xa, xb, xc, tol=1e-9, max_iter=60):
    """Minimize g on a bracketing triple; returns (x, g(x))."""
    a, b = min(xa, xc), max(xa, xc)
    x = w = v = xb
    fx = fw = fv = g(x)
    d = e = 0.0
    for _ in range(max_iter):
        xm = 0.5 * (a + b)
        tol1 = tol * abs(x) + 1e-12
        tol2 = 2.0 * tol1
        if abs(x - xm) <= tol2 - 0.5 * (b - a):
            break
        use_golden = True
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0.0:
                p = -p
            q = abs(q)
            e_prev, e = e, d
            if abs(p) < abs(0.5 * q * e_prev) and q * (a - x) < p < q * (b - x):
                d = p / q
                u = x + d
                if u - a < tol2 or b - u < tol2:
                    d = math.copysign(tol1, xm - x)
                use_golden = False
        if use_golden:
            e = (a if x >= xm else b) - x
            d = _CGOLD * e
        u = x + d if abs(d) >= tol1 else x + math.copysign(tol1, d)
        fu = g(u)
        if fu <= fx:
            if u >= x:
                a = x
            else:
                b = x
            v, w, x = w, x, u
            fv, fw, fx = fw, fx, fu
        else:
            if u < x:
                a = u
            else:
                b = u
            if fu <= fw or w == x:
                v, w = w, u
                fv, fw = fw, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    return x, fx


@dataclass
class PowellResult:
    weights: np.ndarray
    value: float
    evals: int = 0
    iterations: int = 0
    converged: bool = False


def powell_optimize(objective, w0, tol=1e-10, max_iters=30) -> PowellResult:
    """Classic direction-set minimization; never returns a worse point.

    Each iteration line-minimizes along every direction in turn, then may
    replace the direction of largest decrease with the iteration's overall
    displacement. Stops when an iteration improves the objective by less
    than tol; if max_iters runs out first, the best point so far comes back
    with converged=False.
    """
    evals = 0

    def f(x):
        nonlocal evals
        evals += 1
        return float(objective(np.asarray(x, dtype=np.float64)))

    p = np.array(w0, dtype=np.float64)
    n = p.size
    dirs = [np.eye(n)[i] for i in range(n)]
    fp = f(p)
    converged = False
    iteration = 0
    for iteration in range(1, max_iters + 1):
        f_start = fp
        p_start = p.copy()
        biggest_drop, biggest_idx = 0.0, 0
        for i, u in enumerate(dirs):
            def g(t, u=u):
                return f(p + t * u)
            xa, xb, xc = _bracket(g)
            t, ft = _brent(g, xa, xb, xc)
            if ft < fp:
                if fp - ft > biggest_drop:
                    biggest_drop, biggest_idx = fp - ft, i
                p = p + t * u
                fp = ft
        if f_start - fp <= tol:
            converged = True
            break
        extrapolated = 2.0 * p - p_start
        fe = f(extrapolated)
        if fe < f_start:
            crit = (2.0 * (f_start - 2.0 * fp + fe)
                    * (f_start - fp - biggest_drop) ** 2
                    - biggest_drop * (f_start - fe) ** 2)
            if crit < 0.0:
                new_dir = p - p_start
                if np.linalg.norm(new_dir) > 0.0:
                    def g(t, u=new_dir):
                        return f(p + t * u)
                    xa, xb, xc = _bracket(g)
                    t, ft = _brent(g, xa, xb, xc)
                    if ft < fp:
                        p = p + t * new_dir
                        fp = ft
                    dirs[biggest_idx] = dirs[-1]
                    dirs[-1] = new_dir
    return PowellResult(weights=p, value=fp, evals=evals,
                        iterations=iteration, converged=converged)


def _dev_wer(records, w: np.ndarray) -> float:
    pairs = [(rec.rows[select(rec.rows, w)].words, rec.reference) for rec in records]
    return corpus_wer(pairs)


def tune_weights(dev_records, w0: WeightVector = ASR_WEIGHTS, tol=1e-9,
                 max_iters=20) -> WeightVector:
    """Minimize dev corpus WER over the four weights via Powell's method.

    The result's dev WER never exceeds the starting weights' dev WER, so the
    default start (pure acoustic score) bounds tuning by the ASR 1-best.
    """
    dev_records = list(dev_records)
    if not dev_records:
        raise InputError("tune_weights: empty dev set")
    result = powell_optimize(lambda w: _dev_wer(dev_records, w),
                             w0.as_array(), tol=tol, max_iters=max_iters)
    return WeightVector.from_array(result.weights)


# ---------------------------------------------------------------------------
# threshold grid search

@dataclass(frozen=True)
class DecisionRecord:
    """Everything the threshold decision needs for one scored record."""

    record: object          # NBestRecord
    scores: tuple           # rescore score per hypothesis
    mean_logp: float        # decoder confidence of the greedy decode
    decoded_words: tuple
    domain: str = ""


@dataclass(frozen=True)
class ThresholdResult:
    threshold_r: float
    threshold_w: float
    feasible: bool
    in_wer: float
    all_wer: float


def apply_thresholds(dr: DecisionRecord, threshold_r: float, threshold_w: float):
    """Final 1-best words for one record under the given thresholds."""
    stub = model.DecodeResult(tokens=(), token_logps=(), mean_logp=dr.mean_logp)
    _, words = model.rewrite_decide(stub, dr.scores, dr.record, threshold_r,
                                    threshold_w, dr.decoded_words)
    return words


def _threshold_wer(records, threshold_r, threshold_w) -> float:
    return corpus_wer([(apply_thresholds(dr, threshold_r, threshold_w),
                        dr.record.reference) for dr in records])


def grid_search_thresholds(dev_in, dev_all, r_grid, w_grid) -> ThresholdResult:
    """Pick (threshold_R, threshold_W) on the two dev slices.

    threshold_R is searched first under rescore-only decisions, minimizing
    in-domain WER subject to the all-domain WER not exceeding the no-op
    baseline; threshold_W is then searched over values strictly above the
    chosen threshold_R with the same feasibility rule, against an implicit
    no-rewrite candidate, so rewriting must strictly help the dev set to be
    enabled. An empty feasible set returns (+inf, +inf) with feasible=False.
    """
    dev_in, dev_all = list(dev_in), list(dev_all)
    if not dev_in or not dev_all:
        raise InputError("grid_search_thresholds: empty dev slice")
    eps = 1e-12
    baseline_all = _threshold_wer(dev_all, math.inf, math.inf)
    baseline_in = _threshold_wer(dev_in, math.inf, math.inf)

    best_r, best_in = None, math.inf
    for r in sorted({float(r) for r in r_grid}):
        if _threshold_wer(dev_all, r, math.inf) > baseline_all + eps:
            continue
        wer_in = _threshold_wer(dev_in, r, math.inf)
        if wer_in < best_in - eps:
            best_r, best_in = r, wer_in
    if best_r is None:
        return ThresholdResult(math.inf, math.inf, False, baseline_in, baseline_all)

    best_w, best_in_w = math.inf, best_in
    for w in sorted({float(w) for w in w_grid}):
        if not w > best_r:
            continue
        if _threshold_wer(dev_all, best_r, w) > baseline_all + eps:
            continue
        wer_in = _threshold_wer(dev_in, best_r, w)
        if wer_in < best_in_w - eps:
            best_w, best_in_w = w, wer_in
    return ThresholdResult(best_r, best_w, True, best_in_w,
                           _threshold_wer(dev_all, best_r, best_w))


# ---------------------------------------------------------------------------
# file formats

def write_signals(records, path):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            obj = {"id": rec.query_id, "domain": rec.domain,
                   "ref": " ".join(rec.reference),
                   "rows": [{"text": " ".join(r.words),
                             "am": r.signals.acoustic_logp,
                             "lm": r.signals.firstpass_lm_logp,
                             "rs": r.signals.rescorer_logp,
                             "lmplus": r.signals.lm_cost_plus,
                             "injected": r.injected}
                            for r in rec.rows]}
            f.write(json.dumps(obj) + "\n")


def read_signals(path) -> list:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rows = [CandidateRow(words=tuple(r["text"].split()),
                                     injected=bool(r.get("injected", False)),
                                     signals=SignalVector(float(r["am"]), float(r["lm"]),
                                                          float(r["rs"]), float(r["lmplus"])))
                        for r in obj["rows"]]
                records.append(SignalRecord(query_id=obj["id"],
                                            reference=tuple(obj["ref"].split()),
                                            rows=rows, domain=obj.get("domain", "")))
            except (KeyError, TypeError, ValueError, InputError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed signal record ({exc})") from exc
            if not records[-1].rows:
                raise ParseError(f"{path}:{lineno}: record has no candidate rows")
    return records


def save_weights(weights: WeightVector, path):
    with open(path, "w", encoding="utf-8") as f:
        for name in SIGNAL_NAMES:
            f.write(f"{name}={getattr(weights, name)!r}\n")


def load_weights(path) -> WeightVector:
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or key not in SIGNAL_NAMES:
                raise ParseError(f"{path}:{lineno}: unknown weight line {line!r}")
            values[key] = float(value)
    if set(values) != set(SIGNAL_NAMES):
        raise ParseError(f"{path}: missing weights {set(SIGNAL_NAMES) - set(values)}")
    return WeightVector(**values)
