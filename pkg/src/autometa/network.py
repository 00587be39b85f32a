"""Compile a cell genotype into a full CNN (stem, stacked cells, head)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cells import NUM_CELL_INPUTS, Cell
from .nn import BNStats, LayerKind, Mode, forward
from .tensor import Tensor

_OP_KIND = {
    "conv3": LayerKind.CONV3X3,
    "fconv5": LayerKind.FACTORIZED_CONV5X5,
    "id": LayerKind.IDENTITY,
    "avg3": LayerKind.AVG_POOL3X3,
    "max3": LayerKind.MAX_POOL3X3,
}


@dataclass(frozen=True)
class NetworkSpec:
    cell: Cell
    filters: int = 10
    unroll: int = 0
    feature_scale_rate: int = 2
    n_stages: int = 2
    n_classes: int = 5
    in_channels: int = 1

    def __post_init__(self):
        if self.filters < 1:
            raise ValueError("filters must be >= 1")
        if self.unroll < 0:
            raise ValueError("unroll must be >= 0")
        if self.feature_scale_rate not in (1, 2):
            raise ValueError("feature_scale_rate must be 1 or 2")
        if self.n_stages < 1 or self.n_classes < 2:
            raise ValueError("need n_stages >= 1 and n_classes >= 2")
        if not self.cell.blocks:
            raise ValueError("cell has no blocks")

    def to_dict(self) -> dict:
        return {"cell": self.cell.to_list(), "filters": self.filters, "unroll": self.unroll,
                "feature_scale_rate": self.feature_scale_rate, "n_stages": self.n_stages,
                "n_classes": self.n_classes, "in_channels": self.in_channels}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["cell"] = Cell.from_list(d["cell"])
        return cls(**d)


@dataclass
class ModelState:
    """Parameter values plus BatchNorm running statistics."""

    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelState":
        return ModelState({k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.buffers.items()})


@dataclass
class _Unit:
    """One branch of a block: ReLU -> [1x1 projection] -> op -> BatchNorm."""

    prefix: str
    op: str
    c_in: int
    c_out: int

    @property
    def projects(self) -> bool:
        return self.op not in ("conv3", "fconv5") and self.c_in != self.c_out


@dataclass
class _CellInstance:
    prefix: str
    channels: int
    units: list[tuple[_Unit, _Unit]]
    inputs: list[tuple[int, int]]
    outputs: list[int]


class Network:
    """Structure of a compiled network; parameter values live in :class:`ModelState`."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self._shapes: dict[str, tuple[tuple[int, ...], str, int]] = {}
        self._bn: list[tuple[str, int]] = []
        cell = spec.cell
        f = spec.filters

        self._conv("stem.conv", spec.in_channels, f, 3, 3)
        self._batchnorm("stem.bn", f)

        self.stages: list[list[_CellInstance]] = []
        c_prev = c_prevprev = f
        for s in range(spec.n_stages):
            c = f * spec.feature_scale_rate ** s
            stage = []
            for k in range(spec.unroll + 1):
                inst = self._build_cell(f"s{s}.c{k}", cell, c, (c_prev, c_prevprev))
                stage.append(inst)
                c_prevprev, c_prev = c_prev, c
            self.stages.append(stage)

        self._linear("head", c_prev, spec.n_classes)

    # -- parameter registry
    def _conv(self, name, c_in, c_out, kh, kw):
        self._shapes[name + ".w"] = ((c_out, c_in, kh, kw), "he", c_in * kh * kw)
        self._shapes[name + ".b"] = ((c_out,), "zero", 0)

    def _batchnorm(self, name, c):
        self._shapes[name + ".gamma"] = ((c,), "one", 0)
        self._shapes[name + ".beta"] = ((c,), "zero", 0)
        self._bn.append((name, c))

    def _linear(self, name, c_in, c_out):
        self._shapes[name + ".w"] = ((c_out, c_in), "he", c_in)
        self._shapes[name + ".b"] = ((c_out,), "zero", 0)

    def _build_cell(self, prefix, cell: Cell, c: int, in_channels: tuple[int, int]) -> _CellInstance:
        block_channels: list[int] = []
        units, inputs = [], []
        for b, blk in enumerate(cell.blocks):
            pair = []
            for side, br in (("l", blk.left), ("r", blk.right)):
                c_in = in_channels[br.input] if br.input < NUM_CELL_INPUTS \
                    else block_channels[br.input - NUM_CELL_INPUTS]
                unit = _Unit(f"{prefix}.b{b}.{side}", br.op, c_in, c)
                if unit.projects:
                    self._conv(unit.prefix + ".proj", c_in, c, 1, 1)
                if br.op == "conv3":
                    self._conv(unit.prefix + ".conv", c_in, c, 3, 3)
                elif br.op == "fconv5":
                    self._conv(unit.prefix + ".conv1x5", c_in, c, 1, 5)
                    self._conv(unit.prefix + ".conv5x1", c, c, 5, 1)
                self._batchnorm(unit.prefix + ".bn", c)
                pair.append(unit)
            units.append(tuple(pair))
            inputs.append((blk.left.input, blk.right.input))
            block_channels.append(c)
        outputs = cell.unconsumed()
        self._conv(prefix + ".out", c * len(outputs), c, 1, 1)
        self._batchnorm(prefix + ".out_bn", c)
        return _CellInstance(prefix, c, units, inputs, outputs)

    # -- state
    @property
    def param_names(self) -> list[str]:
        return list(self._shapes)

    def param_count(self) -> int:
        return int(sum(np.prod(shape) for shape, _, _ in self._shapes.values()))

    def conv_param_count(self) -> int:
        return int(sum(np.prod(shape) for name, (shape, _, _) in self._shapes.items()
                       if len(shape) == 4))

    def init_state(self, seed: int) -> ModelState:
        """Seeded He-normal weights, zero biases, BN gamma=1 beta=0."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, (shape, kind, fan_in) in self._shapes.items():
            if kind == "he":
                params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            elif kind == "one":
                params[name] = np.ones(shape)
            else:
                params[name] = np.zeros(shape)
        buffers = {}
        for name, c in self._bn:
            buffers[name + ".mean"] = np.zeros(c)
            buffers[name + ".var"] = np.ones(c)
        return ModelState(params, buffers)

    # -- forward
    def forward(self, params: dict[str, Tensor], buffers: dict[str, np.ndarray],
                x: Tensor, mode: Mode) -> Tensor:
        def bn(name, h):
            stats = BNStats(buffers[name + ".mean"], buffers[name + ".var"])
            return forward(LayerKind.BATCH_NORM, [h], [params[name + ".gamma"], params[name + ".beta"]],
                           mode, stats)

        def conv(name, h, kind=LayerKind.CONV3X3):
            return forward(kind, [h], [params[name + ".w"], params[name + ".b"]])

        def unit(u: _Unit, h):
            h = T.relu(h)
            if u.projects:
                h = conv(u.prefix + ".proj", h, LayerKind.CONV1X1)
            if u.op == "conv3":
                h = conv(u.prefix + ".conv", h)
            elif u.op == "fconv5":
                p = u.prefix
                h = forward(LayerKind.FACTORIZED_CONV5X5, [h],
                            [params[p + ".conv1x5.w"], params[p + ".conv1x5.b"],
                             params[p + ".conv5x1.w"], params[p + ".conv5x1.b"]])
            else:
                h = forward(_OP_KIND[u.op], [h])
            return bn(u.prefix + ".bn", h)

        def run_cell(inst: _CellInstance, prev, prevprev):
            sources = [prev, prevprev]
            for (lu, ru), (li, ri) in zip(inst.units, inst.inputs):
                sources.append(forward(LayerKind.ADD, [unit(lu, sources[li]), unit(ru, sources[ri])]))
            h = forward(LayerKind.CONCAT, [sources[NUM_CELL_INPUTS + b] for b in inst.outputs])
            h = conv(inst.prefix + ".out", T.relu(h), LayerKind.CONV1X1)
            return bn(inst.prefix + ".out_bn", h)

        h = bn("stem.bn", conv("stem.conv", x))
        prev = prevprev = h
        for s, stage in enumerate(self.stages):
            if s > 0:
                same = prev is prevprev
                prev = T.avg_pool2_stride2(prev)
                prevprev = prev if same else T.avg_pool2_stride2(prevprev)
            for inst in stage:
                prevprev, prev = prev, run_cell(inst, prev, prevprev)
        h = forward(LayerKind.GLOBAL_AVG_POOL, [T.relu(prev)])
        return forward(LayerKind.LINEAR, [h], [params["head.w"], params["head.b"]])

    def loss_and_grads(self, state: ModelState, x: np.ndarray, y: np.ndarray,
                       mode: Mode = Mode.TRAIN) -> tuple[float, dict[str, np.ndarray]]:
        """Softmax cross-entropy on (x, y) and its gradient w.r.t. every parameter.

        In Train mode the BatchNorm running statistics in ``state`` are updated.
        """
        tparams = {k: Tensor(v, requires_grad=True) for k, v in state.params.items()}
        loss = T.softmax_xent(self.forward(tparams, state.buffers, Tensor(x), mode), y)
        grads = T.backward(loss, tparams.values())
        return float(loss.data), {k: grads[t] for k, t in tparams.items()}

    def logits(self, state: ModelState, x: np.ndarray, mode: Mode) -> np.ndarray:
        if mode is Mode.TRAIN:
            raise ValueError("use an evaluation mode for prediction")
        with T.no_grad():
            tparams = {k: Tensor(v) for k, v in state.params.items()}
            return self.forward(tparams, state.buffers, Tensor(x), mode).data


def compile_network(spec: NetworkSpec) -> Network:
    return Network(spec)
