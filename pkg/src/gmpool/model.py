"""End-to-end graph regressor/classifier with grouping-matrix pooling.

Pipeline: DMPNN (``steps``) -> grouping matrix -> pooling (GMPool, NGMPool or
none) -> dense message passing on the coarsened graph (``steps_post``) ->
weighted mean readout -> linear head.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import dmpnn
from .graph_data import Graph
from .linalg import EigBackwardConfig, SymEig
from .pooling import (
    CoarsenedGraph,
    gmpool_coarsen,
    gmpool_decompose,
    grouping_matrix,
    ngmpool_coarsen,
    pairwise_input,
)

__all__ = ["ModelConfig", "GMPoolModel", "ForwardResult", "CHECKPOINT_FORMAT", "ADAM_DEFAULTS"]

CHECKPOINT_FORMAT = "gmpool-checkpoint/1"
POOLINGS = ("gmpool", "ngmpool", "none")
READOUTS = ("mean", "sum")
ADAM_DEFAULTS = {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8}


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 200
    steps: int = 4
    steps_post: int = 2
    dropout_p: float = 0.15
    pooling: str = "gmpool"
    readout: str = "mean"
    clamp_diagonal: bool = False
    eigengap_floor: float = 1e-4
    normalize_pooled: bool = True
    distance_prior: bool = True

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        if self.readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}")
        self.dmpnn  # validates the encoder fields

    @property
    def dmpnn(self) -> dmpnn.DmpnnConfig:
        return dmpnn.DmpnnConfig(self.hidden, self.steps, self.steps_post, self.dropout_p)

    @property
    def eig(self) -> EigBackwardConfig:
        return EigBackwardConfig(self.eigengap_floor)


def _size_normalize(x: ad.Tensor, e: ad.Tensor, size: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
    """Divide pooled rows by their effective node count, floored at one node.

    With an ideal block grouping this turns pooled sums into group means.
    """
    inv = ad.reciprocal(ad.clamp_min(size, 1.0))
    return ad.einsum("a,ah->ah", inv, x), ad.einsum("a,abh,b->abh", inv, e, inv)


@dataclass
class ForwardResult:
    prediction: ad.Tensor  # shape (1,)
    embedding: ad.Tensor
    encoded: dmpnn.DmpnnOutput
    grouping: ad.Tensor | None = None
    eig: SymEig | None = None
    pool: ad.Tensor | None = None
    coarse: CoarsenedGraph | None = None


@dataclass
class GMPoolModel:
    config: ModelConfig
    d_n: int
    d_e: int
    params: dict[str, ad.Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, d_n: int, d_e: int, seed: int = 0) -> GMPoolModel:
        rng = np.random.default_rng(seed)
        h = config.hidden
        params = {f"enc.{k}": v for k, v in dmpnn.DmpnnParams.init(d_n, d_e, h, rng).tensors().items()}
        if config.pooling != "none":
            w, b = dmpnn.init_linear(rng, h, 1)
            if config.distance_prior:
                # larger feature distance starts out as lower same-group probability
                w.values[...] = -np.abs(w.values)
            params["clf.w"], params["clf.b"] = w, b
            if config.steps_post > 0:
                post = dmpnn.DenseParams.init(h, rng).tensors()
                params.update({f"post.{k}": v for k, v in post.items()})
        w, b = dmpnn.init_linear(rng, h, 1)
        params["head.w"], params["head.b"] = w, b
        return cls(config, d_n, d_e, params)

    # ------------------------------------------------------------------
    @property
    def encoder(self) -> dmpnn.DmpnnParams:
        p = self.params
        return dmpnn.DmpnnParams(
            p["enc.W_edge_init"], p["enc.b_edge_init"], p["enc.W_e"], p["enc.W_n"], p["enc.b_n"]
        )

    @property
    def post(self) -> dmpnn.DenseParams:
        p = self.params
        return dmpnn.DenseParams(p["post.W_e"], p["post.W_n"], p["post.b_n"])

    def parameters(self) -> list[ad.Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def encode(self, g: Graph, training: bool = False, rng=None) -> dmpnn.DmpnnOutput:
        return dmpnn.forward(g, self.encoder, self.config.dmpnn, training, rng)

    def grouping(self, g: Graph, encoded: dmpnn.DmpnnOutput | None = None) -> ad.Tensor:
        """Grouping matrix of ``g`` (eval mode unless ``encoded`` is given)."""
        if "clf.w" not in self.params:
            raise ValueError("model has no grouping classifier (pooling='none')")
        if encoded is None:
            encoded = self.encode(g)
        t = pairwise_input(encoded.X_out)
        return grouping_matrix(t, self.params["clf.w"], self.params["clf.b"], self.config.clamp_diagonal)

    def forward(self, g: Graph, training: bool = False, rng: np.random.Generator | None = None) -> ForwardResult:
        cfg = self.config
        enc = self.encode(g, training, rng)
        result = ForwardResult(None, None, enc)
        if cfg.pooling == "none":
            x, weights = enc.X_out, None
        else:
            m = self.grouping(g, enc)
            adj = ad.constant(g.adjacency)
            if cfg.pooling == "gmpool":
                op, _ = gmpool_decompose(m, cfg.eig)
                coarse = gmpool_coarsen(enc.X_out, enc.E_out, adj, op.S)
                result.eig, result.pool = op.eig, op.S
            else:
                coarse = ngmpool_coarsen(enc.X_out, enc.E_out, adj, m)
            result.grouping, result.coarse = m, coarse
            px, pe = coarse.x, coarse.e
            if cfg.normalize_pooled:
                if cfg.pooling == "gmpool":
                    size = op.degree
                else:
                    size = ad.sum_rows(m)
                px, pe = _size_normalize(px, pe, size)
            x = px
            if cfg.steps_post > 0:
                x = dmpnn.dense_forward(px, pe, self.post, cfg.steps_post, cfg.dropout_p, training, rng)
            weights = coarse.ones
        if cfg.readout == "mean":
            emb = dmpnn.readout_mean(x, weights)
        else:
            emb = dmpnn.readout_sum(x, weights)
        pred = ad.add(ad.reshape(ad.matmul(ad.reshape(emb, (1, -1)), self.params["head.w"]), (1,)), self.params["head.b"])
        result.prediction, result.embedding = pred, emb
        return result

    def predict(self, graphs) -> np.ndarray:
        return np.array([float(self.forward(g).prediction.values[0]) for g in graphs])

    # ------------------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {self.params[k].shape} vs {v.shape}")
            self.params[k].values[...] = v

    def to_dict(self, extra: dict | None = None) -> dict:
        out = {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "d_n": self.d_n,
            "d_e": self.d_e,
            "adam": dict(ADAM_DEFAULTS),
            "params": {
                k: {"shape": list(v.shape), "values": v.values.ravel().tolist()} for k, v in sorted(self.params.items())
            },
        }
        if extra:
            out["meta"] = extra
        return out

    def save(self, path: str | os.PathLike, extra: dict | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(extra), fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_dict(cls, data: dict) -> GMPoolModel:
        if data.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {data.get('format')!r}")
        model = cls.init(ModelConfig(**data["config"]), data["d_n"], data["d_e"])
        stored = data["params"]
        if set(stored) != set(model.params):
            raise ValueError("checkpoint parameters do not match the configured model")
        model.load_state({k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in stored.items()})
        return model

    @classmethod
    def load(cls, path: str | os.PathLike) -> GMPoolModel:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
