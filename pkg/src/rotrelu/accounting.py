"""Parameter and FLOP accounting, savings reports, filter-path lengths and slope histograms.

Two FLOP conventions are kept side by side.  The *paper* convention counts a
convolution or dense layer as twice its multiplications (its addition
estimate ``(c_in - 1)(k^2 - 1)`` per output is reported but not used in the
total) plus one addition per joined residual element.  The *exact* convention
counts ``c_in k^2 - 1`` additions per convolution output.  Both are closed
forms over a :class:`~rotrelu.models.ModelSpec`; :func:`count_flops_oracle`
measures the same quantities from an actual forward pass.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .errors import InputError
from .models import Model, ModelSpec
from .pruning import PruneMask, channel_links, removed_branches

PARAM_KINDS = ("linear", "conv", "bn", "act")


@dataclass
class LayerParams:
    layer: str
    kind: str
    weights: int = 0
    bias: int = 0
    bn: int = 0
    slopes: int = 0

    @property
    def total(self) -> int:
        return self.weights + self.bias + self.bn + self.slopes


@dataclass
class ParamCount:
    rows: List[LayerParams]

    def column(self, name: str) -> int:
        return sum(getattr(r, name) for r in self.rows)

    @property
    def total(self) -> int:
        return sum(r.total for r in self.rows)

    @property
    def weights(self) -> int:
        """Conv/linear weights and biases: the figure comparable to published '#Params'."""
        return self.column("weights") + self.column("bias")

    def by_layer(self) -> Dict[str, LayerParams]:
        return {r.layer: r for r in self.rows}


@dataclass
class LayerFlops:
    layer: str
    kind: str
    mults: int = 0
    adds: int = 0

    @property
    def flops(self) -> int:
        return self.mults + self.adds


@dataclass
class FlopCount:
    rows: List[LayerFlops]
    convention: str

    @property
    def mults(self) -> int:
        return sum(r.mults for r in self.rows)

    @property
    def adds(self) -> int:
        return sum(r.adds for r in self.rows)

    @property
    def total(self) -> int:
        return sum(self.flops_of(r) for r in self.rows)

    def flops_of(self, r: LayerFlops) -> int:
        # the paper's total for weight layers is 2 x multiplications
        if self.convention == "paper" and r.kind in ("conv", "linear"):
            return 2 * r.mults
        return r.flops

    def by_layer(self) -> Dict[str, LayerFlops]:
        return {r.layer: r for r in self.rows}


# -------------------------------------------------------------------- params

def count_params(spec: ModelSpec) -> ParamCount:
    rows = []
    for ld in spec.layers:
        if ld.kind == "linear":
            rows.append(LayerParams(ld.name, ld.kind, weights=ld.c_in * ld.c_out, bias=ld.c_out if ld.bias else 0))
        elif ld.kind == "conv":
            rows.append(LayerParams(ld.name, ld.kind, weights=ld.c_out * ld.c_in * ld.k * ld.k))
        elif ld.kind == "bn":
            rows.append(LayerParams(ld.name, ld.kind, bn=2 * ld.c_out))
        elif ld.kind == "act" and ld.mode == "rrelu":
            rows.append(LayerParams(ld.name, ld.kind, slopes=ld.c_out))
    return ParamCount(rows)


def predicted_params_after(spec: ModelSpec, mask: PruneMask) -> ParamCount:
    """Closed-form parameter count after removing the masked channels.

    A conv layer keeps ``(c_out - n_out)(c_in - n_in) k^2`` weights, where
    ``n_out`` channels of its own output and ``n_in`` of its input were pruned;
    residual branches whose join input is fully pruned keep nothing.
    """
    links = channel_links(spec)
    n_out: Dict[int, int] = defaultdict(int)
    n_in: Dict[int, int] = defaultdict(int)
    for name, link in links.items():
        n = int(mask.layers[name].sum())
        n_out[link.producer] += n
        n_out[link.act] += n
        if link.bn is not None:
            n_out[link.bn] += n
        if spec.layers[link.consumer].kind != "join":
            n_in[link.consumer] += n
    gone = set()
    for f, j in removed_branches(spec, mask):
        gone.update(range(f + 1, j))
    rows = []
    for i, ld in enumerate(spec.layers):
        if i in gone:
            continue
        o, c_in = ld.c_out - n_out[i], ld.c_in - n_in[i]
        if ld.kind == "linear":
            rows.append(LayerParams(ld.name, ld.kind, weights=c_in * o, bias=o if ld.bias else 0))
        elif ld.kind == "conv":
            rows.append(LayerParams(ld.name, ld.kind, weights=o * c_in * ld.k * ld.k))
        elif ld.kind == "bn":
            rows.append(LayerParams(ld.name, ld.kind, bn=2 * o))
        elif ld.kind == "act" and ld.mode == "rrelu":
            rows.append(LayerParams(ld.name, ld.kind, slopes=o))
    return ParamCount(rows)


# --------------------------------------------------------------------- flops

def _spatial(spec: ModelSpec, input_shape=None):
    if input_shape is not None and tuple(input_shape) != spec.input_shape:
        spec = ModelSpec(spec.layers, spec.activation, spec.num_classes, tuple(input_shape), spec.name)
    return spec.infer_shapes()


def _count_flops(spec: ModelSpec, input_shape, exact: bool) -> FlopCount:
    shapes = _spatial(spec, input_shape)
    rows = []
    for ld, out in zip(spec.layers, shapes):
        if ld.kind == "linear":
            mults = ld.c_in * ld.c_out
            adds = (ld.c_in - 1) * ld.c_out + (ld.c_out if (exact and ld.bias) else 0)
            rows.append(LayerFlops(ld.name, ld.kind, mults, adds))
        elif ld.kind == "conv":
            hw = out[1] * out[2]
            mults = ld.c_in * ld.k ** 2 * hw * ld.c_out
            if exact:
                adds = (ld.c_in * ld.k ** 2 - 1) * hw * ld.c_out
            else:
                adds = (ld.c_in - 1) * (ld.k ** 2 - 1) * hw * ld.c_out
            rows.append(LayerFlops(ld.name, ld.kind, mults, adds))
        elif ld.kind == "join":
            rows.append(LayerFlops(ld.name, ld.kind, 0, ld.branch_channels * out[1] * out[2]))
    return FlopCount(rows, "exact" if exact else "paper")


def count_flops_paper(spec: ModelSpec, input_shape=None) -> FlopCount:
    """Per-sample FLOPs by the published formulas: weight layers count ``2 x mults``."""
    return _count_flops(spec, input_shape, exact=False)


def count_flops_exact(spec: ModelSpec, input_shape=None) -> FlopCount:
    """Per-sample multiply and add counts of a dot-product implementation, from the spec."""
    return _count_flops(spec, input_shape, exact=True)


def count_flops_oracle(model: Model, input_shape=None) -> FlopCount:
    """Count the multiplies and adds executed by a real single-sample forward pass.

    Counts come from the operand shapes the kernels actually ran on: the
    im2col matrix product for a convolution, the dense product for a linear
    layer and the number of channels scattered into each residual join.
    """
    rows = []

    def counter(ld, kind, **s):
        if kind == "conv":
            n, c_in, _, _ = s["x"]
            c_out, _, k, _ = s["w"]
            _, _, ho, wo = s["out"]
            patches, inner = n * ho * wo, c_in * k * k
            rows.append(LayerFlops(ld.name, kind, patches * inner * c_out, patches * (inner - 1) * c_out))
        elif kind == "linear":
            n, fin = s["x"][0], s["w"][0]
            fout = s["w"][1]
            adds = n * (fin - 1) * fout + (n * fout if s["bias"] else 0)
            rows.append(LayerFlops(ld.name, kind, n * fin * fout, adds))
        elif kind == "join":
            rows.append(LayerFlops(ld.name, kind, 0, int(np.prod(s["branch"]))))

    shape = tuple(input_shape) if input_shape is not None else model.spec.input_shape
    model.forward_graph(np.zeros((1,) + shape, dtype=model.dtype), train=False, counter=counter)
    return FlopCount(rows, "exact")


# ------------------------------------------------------------------- reports

@dataclass
class SavingsRow:
    layer: str
    kind: str
    params_before: int
    params_after: int
    flops_paper_before: int
    flops_paper_after: int
    flops_exact_before: int
    flops_exact_after: int


@dataclass
class SavingsReport:
    rows: List[SavingsRow]
    gamma: float
    filters_ignored: int
    total_channels: int
    weights_before: int
    weights_after: int
    notes: List[str] = field(default_factory=list)

    COLUMNS = ("params_before", "params_after", "flops_paper_before", "flops_paper_after",
               "flops_exact_before", "flops_exact_after")

    def total(self, column: str) -> int:
        return sum(getattr(r, column) for r in self.rows)

    @property
    def pct_ignored(self) -> float:
        return 100.0 * self.filters_ignored / self.total_channels if self.total_channels else 0.0

    def saving_pct(self, what: str = "params") -> float:
        col = "params" if what == "params" else f"flops_{what}"
        before = self.total(f"{col}_before")
        return 100.0 * (before - self.total(f"{col}_after")) / before if before else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("layer", "kind") + self.COLUMNS)
        for r in self.rows:
            w.writerow([r.layer, r.kind] + [getattr(r, c) for c in self.COLUMNS])
        w.writerow(["TOTAL", ""] + [self.total(c) for c in self.COLUMNS])
        return buf.getvalue()

    def to_text(self) -> str:
        head = ("layer", "kind") + self.COLUMNS
        body = [[r.layer, r.kind] + [str(getattr(r, c)) for c in self.COLUMNS] for r in self.rows]
        body.append(["TOTAL", ""] + [str(self.total(c)) for c in self.COLUMNS])
        widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
        fmt = lambda cells: "  ".join(str(c).rjust(w) if i > 1 else str(c).ljust(w)  # noqa: E731
                                      for i, (c, w) in enumerate(zip(cells, widths)))
        lines = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(b) for b in body]
        lines += [
            "",
            f"gamma                       {self.gamma}",
            f"Filters ignored             {self.filters_ignored}/{self.total_channels} ({self.pct_ignored:.2f}%)",
            f"#Params (weights, Table-1)  {self.weights_before} -> {self.weights_after}",
            f"#Params (all)               {self.total('params_before')} -> {self.total('params_after')}"
            f" ({self.saving_pct('params'):.2f}% saved)",
            f"FLOPs (paper, 2 x mults)    {self.total('flops_paper_before')} -> {self.total('flops_paper_after')}"
            f" ({self.saving_pct('paper'):.2f}% saved)",
            f"FLOPs (exact)               {self.total('flops_exact_before')} -> {self.total('flops_exact_after')}"
            f" ({self.saving_pct('exact'):.2f}% saved)",
        ]
        lines += self.notes
        return "\n".join(lines) + "\n"


def savings_report(before: ModelSpec, after: ModelSpec, gamma: float,
                   slopes: Dict[str, np.ndarray]) -> SavingsReport:
    """Per-layer before/after parameter and FLOP counts for a pruned network.

    ``slopes`` are the slopes of the unpruned network; the ignored-filter
    percentage is taken over all RReLU channels (the plain-ReLU stem excluded).
    """
    pb, pa = count_params(before).by_layer(), count_params(after).by_layer()
    fb, fa = count_flops_paper(before).by_layer(), count_flops_paper(after).by_layer()
    eb, ea = count_flops_exact(before).by_layer(), count_flops_exact(after).by_layer()
    paper_b, paper_a = count_flops_paper(before), count_flops_paper(after)
    rows = []
    for ld in before.layers:
        if ld.name not in pb and ld.name not in fb:
            continue

        def p(d, name=ld.name):
            return d[name].total if name in d else 0

        def fp(d, count, name=ld.name):
            return count.flops_of(d[name]) if name in d else 0

        rows.append(SavingsRow(ld.name, ld.kind, p(pb), p(pa), fp(fb, paper_b), fp(fa, paper_a),
                               eb[ld.name].flops if ld.name in eb else 0,
                               ea[ld.name].flops if ld.name in ea else 0))
    ignored = sum(int((np.abs(v) < gamma).sum()) for v in slopes.values())
    total = sum(int(v.size) for v in slopes.values())
    notes = []
    joins = [ld for ld in after.layers if ld.kind == "join" and ld.index is not None]
    if joins:
        notes.append("Channels feeding residual joins keep their slot in the joined map; "
                     "only their production cost is removed.")
    return SavingsReport(rows, gamma, ignored, total, count_params(before).weights,
                         count_params(after).weights, notes)


# -------------------------------------------------------------- filter paths

@dataclass
class FilterPathDistribution:
    counts: Dict[int, int]
    per_unit: List[int]

    @property
    def num_units(self) -> int:
        return len(self.per_unit)

    @property
    def total_paths(self) -> int:
        return sum(self.counts.values())

    @property
    def max_length(self) -> int:
        return max(self.counts)

    def probabilities(self) -> Dict[int, float]:
        tot = self.total_paths
        return {k: v / tot for k, v in self.counts.items()}

    def mean(self) -> float:
        return sum(k * v for k, v in self.counts.items()) / self.total_paths

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["length", "count", "probability"])
        tot = self.total_paths
        for k in sorted(self.counts):
            w.writerow([k, self.counts[k], repr(self.counts[k] / tot)])
        return buf.getvalue()


def filter_path_distribution(per_unit_active_counts: Sequence[int]) -> FilterPathDistribution:
    """Exact distribution of filter-path lengths over all ``2^B`` skip/branch choices.

    Each residual unit contributes either 0 (skip) or its active filter count
    (branch).  Built unit by unit, so the cost is polynomial in the number of
    distinct lengths rather than ``2^B``; counts are exact Python integers.
    """
    counts = [int(c) for c in per_unit_active_counts]
    if any(c < 0 for c in counts):
        raise InputError(f"active filter counts must be non-negative, got {counts}")
    dist = {0: 1}
    for f in counts:
        nxt: Dict[int, int] = defaultdict(int)
        for length, n in dist.items():
            nxt[length] += n
            nxt[length + f] += n
        dist = dict(nxt)
    return FilterPathDistribution(dist, counts)


def unit_active_counts(spec: ModelSpec) -> List[int]:
    """Surviving conv output channels inside each residual branch (0 for a skip-only unit)."""
    counts, stack = [], []
    for ld in spec.layers:
        if ld.kind == "fork":
            stack.append(0)
        elif ld.kind == "conv" and stack:
            stack[-1] += ld.c_out
        elif ld.kind == "join":
            n = stack.pop()
            counts.append(n if ld.branch_channels else 0)
    return counts


# ----------------------------------------------------------------- histograms

def _group_of(name: str) -> str:
    head = name.split(".")[0]
    if head.startswith("s") and "u" in head:
        return head.split("u")[0]
    return head


def slope_histogram(model: Model, bins=20, value_range=None) -> List[tuple]:
    """``(group, bin_low, bin_high, count)`` rows per layer group plus ``all``."""
    slopes = model.slopes()
    if not slopes:
        raise InputError("model has no RReLU slopes")
    allv = np.concatenate([v.ravel() for v in slopes.values()]).astype(np.float64)
    if value_range is None:
        m = float(np.abs(allv).max()) or 1.0
        value_range = (-m, m)
    edges = np.histogram_bin_edges(allv, bins=bins, range=value_range)
    groups: Dict[str, List[np.ndarray]] = defaultdict(list)
    for name, v in slopes.items():
        groups[_group_of(name)].append(v.ravel())
    rows = []
    for g, vals in list(groups.items()) + [("all", [allv])]:
        counts, _ = np.histogram(np.concatenate(vals), bins=edges)
        rows += [(g, float(lo), float(hi), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    return rows


def slope_histogram_export(model: Model, bins, path, value_range=None) -> List[tuple]:
    rows = slope_histogram(model, bins, value_range)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["group", "bin_low", "bin_high", "count"])
        for g, lo, hi, c in rows:
            w.writerow([g, repr(lo), repr(hi), c])
    return rows
