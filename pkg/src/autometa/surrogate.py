"""LSTM regressor mapping tokenized cells to predicted accuracy."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .cells import NUM_CELL_INPUTS, OP_INDEX, OPS, Cell, canonicalize
from .nn import OptimState, step
from .tensor import Tensor

EMBED_DIM = 32
HIDDEN = 100


def encode_cell(cell: Cell) -> list[int]:
    """Four tokens per block: [left_in, left_op, right_in, right_op]."""
    tokens = []
    for blk in canonicalize(cell).blocks:
        for br in (blk.left, blk.right):
            tokens += [br.input, OP_INDEX[br.op]]
    return tokens


@dataclass
class SurrogateModel:
    max_blocks: int = 5
    embed_dim: int = EMBED_DIM
    hidden: int = HIDDEN
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def input_vocab(self) -> int:
        return NUM_CELL_INPUTS + self.max_blocks - 1

    def init(self, seed: int) -> "SurrogateModel":
        rng = np.random.default_rng(seed)
        e, h = self.embed_dim, self.hidden
        bias = np.zeros(4 * h)
        bias[h:2 * h] = 1.0  # forget gate
        self.params = {
            "emb_in": rng.normal(0, 0.1, (self.input_vocab, e)),
            "emb_op": rng.normal(0, 0.1, (len(OPS), e)),
            "w_x": rng.normal(0, 1 / np.sqrt(e), (e, 4 * h)),
            "w_h": rng.normal(0, 1 / np.sqrt(h), (h, 4 * h)),
            "b": bias,
            "w_out": rng.normal(0, 1 / np.sqrt(h), (h, 1)),
            "b_out": np.zeros(1),
        }
        return self

    def to_dict(self) -> dict:
        return {"max_blocks": self.max_blocks, "embed_dim": self.embed_dim, "hidden": self.hidden,
                "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                           for k, v in self.params.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateModel":
        params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in d["params"].items()}
        return cls(d["max_blocks"], d["embed_dim"], d["hidden"], params)

    def _forward(self, tp: dict[str, Tensor], tokens: np.ndarray) -> Tensor:
        """Predictions for a batch of equal-length token sequences, shape (n, 1)."""
        n, length = tokens.shape
        h = Tensor(np.zeros((n, self.hidden)))
        c = Tensor(np.zeros((n, self.hidden)))
        for t in range(length):
            table = tp["emb_in"] if t % 2 == 0 else tp["emb_op"]
            x = T.take_rows(table, tokens[:, t])
            z = T.add(T.add(T.matmul(x, tp["w_x"]), T.matmul(h, tp["w_h"])), tp["b"])
            i, f, g, o = T.split(z, 4, axis=1)
            c = T.add(T.mul(T.sigmoid(f), c), T.mul(T.sigmoid(i), T.tanh(g)))
            h = T.mul(T.sigmoid(o), T.tanh(c))
        return T.sigmoid(T.add(T.matmul(h, tp["w_out"]), tp["b_out"]))

    def _check_tokens(self, tokens: np.ndarray) -> None:
        ins, ops = tokens[:, 0::2], tokens[:, 1::2]
        if ins.max(initial=0) >= self.input_vocab or ops.max(initial=0) >= len(OPS):
            raise ValueError(f"cell exceeds the predictor's vocabulary (max_blocks={self.max_blocks})")


def _groups(cells: Sequence[Cell]) -> dict[int, list[int]]:
    by_len: dict[int, list[int]] = defaultdict(list)
    for i, c in enumerate(cells):
        by_len[len(c.blocks)].append(i)
    return dict(sorted(by_len.items()))


def _batch_loss(model: SurrogateModel, tp, token_groups, target_groups, n_total: int) -> Tensor:
    terms = []
    for toks, tgt in zip(token_groups, target_groups):
        pred = model._forward(tp, toks)
        terms.append(T.mul(T.mse(pred, tgt), len(tgt) / n_total))
    return T.add_n(terms)


def surrogate_fit(history: Sequence[tuple[Cell, float]], seed: int = 0, epochs: int = 200,
                  lr: float = 0.01, max_blocks: int = 5) -> tuple[SurrogateModel, list[float]]:
    """Train from scratch with full-batch Adam on MSE; returns (model, loss per epoch)."""
    if not history:
        raise ValueError("surrogate_fit needs a nonempty history")
    cells = [c for c, _ in history]
    y = np.asarray([s for _, s in history], dtype=np.float64)
    if ((y < 0) | (y > 1)).any():
        raise ValueError("scores must lie in [0, 1]")
    model = SurrogateModel(max_blocks).init(seed)
    groups = _groups(cells)
    tok = [np.asarray([encode_cell(cells[i]) for i in idx]) for idx in groups.values()]
    tgt = [y[idx] for idx in groups.values()]
    for tg in tok:
        model._check_tokens(tg)
    names = list(model.params)
    opt = OptimState("adam", lr)
    losses = []
    for _ in range(epochs):
        tp = {k: Tensor(v, requires_grad=True) for k, v in model.params.items()}
        loss = _batch_loss(model, tp, tok, tgt, len(y))
        grads = T.backward(loss, [tp[k] for k in names])
        losses.append(float(loss.data))
        new = step(opt, [model.params[k] for k in names], [grads[tp[k]] for k in names])
        model.params = dict(zip(names, new))
    with T.no_grad():
        tp = {k: Tensor(v) for k, v in model.params.items()}
        losses.append(float(_batch_loss(model, tp, tok, tgt, len(y)).data))
    return model, losses


def surrogate_predict(model: SurrogateModel, cells: Sequence[Cell]) -> list[float]:
    out = np.empty(len(cells))
    with T.no_grad():
        tp = {k: Tensor(v) for k, v in model.params.items()}
        for idx in _groups(cells).values():
            toks = np.asarray([encode_cell(cells[i]) for i in idx])
            model._check_tokens(toks)
            out[idx] = model._forward(tp, toks).data[:, 0]
    # keep saturated sigmoids strictly inside (0, 1)
    return np.clip(out, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)).tolist()
