"""Per-node masked auto-encoder: encoder emits a causal gate row per
transition, decoder predicts the next step from the gated snapshot.

Two execution paths compute the same math:

* per-node ops (``encode_mask_row``, ``apply_mask``, ``decode_predict``) —
  direct transcriptions used by tests and single-cell inspection;
* ``batched_forward`` — one tape pass covering every node, sample and
  transition, used by training and ``forward_full``. Node parameters are
  stacked along a leading axis so that node subsets slice cleanly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor
from .blocks import GcnLayer, GruCell, Mlp, gru_sequence, gru_unroll, mlp_forward

from . import blocks


@dataclass
class ModelConfig:
    """Architecture hyperparameters shared by all node models."""

    hidden: int = 15
    self_loop: float = 1.0
    phi: str = "tanh"
    share_encoder: bool = False
    enc_adjacency: np.ndarray | None = None  # None -> complete graph

    def adjacency(self, n: int) -> np.ndarray:
        if self.enc_adjacency is None:
            return np.ones((n, n))
        a = np.asarray(self.enc_adjacency, dtype=np.float64)
        if a.shape != (n, n):
            raise ShapeError(f"encoder adjacency must be ({n}, {n}), got {a.shape}")
        return a


@dataclass
class NodeModel:
    """All trainable parameters of one node's encoder/decoder pair."""

    index: int
    gru_bank: list  # N GruCell instances, one per input node
    enc_gcn: GcnLayer
    mmg: Mlp  # (N * hidden) -> hidden -> N, sigmoid output
    dec_rl: Mlp  # d -> hidden, shared across input nodes
    dec_ngcn: GcnLayer
    tip: Mlp  # hidden -> hidden -> d

    @property
    def num_nodes(self) -> int:
        return len(self.gru_bank)

    @property
    def input_dim(self) -> int:
        return self.gru_bank[0].input_dim

    @property
    def hidden(self) -> int:
        return self.gru_bank[0].hidden_dim


def init_node_model(index: int, n: int, d: int, config: ModelConfig, base_seed: int,
                    shared_encoder_from: "NodeModel | None" = None) -> NodeModel:
    """Draw one node's parameters from its own stream (base_seed XOR index)."""
    rng = np.random.default_rng(base_seed ^ index)
    h = config.hidden
    a_enc = config.adjacency(n)
    if shared_encoder_from is not None:
        gru_bank = shared_encoder_from.gru_bank
        enc_gcn = shared_encoder_from.enc_gcn
    else:
        gru_bank = [GruCell.init(rng, d, h) for _ in range(n)]
        enc_gcn = GcnLayer.init(rng, a_enc, h, h, self_loop=config.self_loop, phi=config.phi)
    mmg = Mlp.init(rng, [n * h, h, n], hidden_act=config.phi, out_act="sigmoid")
    dec_rl = Mlp.init(rng, [d, h], hidden_act=config.phi, out_act=config.phi)
    dec_ngcn = GcnLayer.init(rng, a_enc, h, h, self_loop=config.self_loop, phi=config.phi)
    tip = Mlp.init(rng, [h, h, d], hidden_act=config.phi, out_act="identity")
    return NodeModel(index=index, gru_bank=gru_bank, enc_gcn=enc_gcn, mmg=mmg,
                     dec_rl=dec_rl, dec_ngcn=dec_ngcn, tip=tip)


def build_node_models(n: int, d: int, config: ModelConfig, base_seed: int) -> list:
    models = []
    for i in range(n):
        shared = models[0] if (config.share_encoder and i > 0) else None
        models.append(init_node_model(i, n, d, config, base_seed, shared))
    return models


# ---------------------------------------------------------------------------
# per-node operations


def encode_mask_row(model: NodeModel, x_hist, tape: Tape | None = None) -> Tensor:
    """Gate row for the transition following ``x_hist`` (shape (N, t, d))."""
    tape = tape or Tape()
    hist = x_hist.data if isinstance(x_hist, Tensor) else np.asarray(x_hist, dtype=np.float64)
    n, d = model.num_nodes, model.input_dim
    if hist.ndim != 3 or hist.shape[0] != n or hist.shape[2] != d:
        raise ShapeError(f"history must be ({n}, t, {d}), got {hist.shape}")
    if hist.shape[1] < 1:
        raise ShapeError("history must contain at least one step")
    x_t = x_hist if isinstance(x_hist, Tensor) else tape.constant(hist)
    rows = []
    for j in range(n):
        series_j = ad.take_axis0(x_t, j)
        h_j = gru_unroll(model.gru_bank[j], series_j)
        rows.append(ad.reshape(h_j, (1, model.hidden)))
    h_mat = ad.concat_rows(rows)
    z = blocks.gcn_forward(model.enc_gcn, h_mat)
    return mlp_forward(model.mmg, ad.flatten(z))


def apply_mask(mask_row: Tensor, x_prev: Tensor) -> Tensor:
    """Scale row j of ``x_prev`` by gate j; differentiable in both inputs."""
    n = x_prev.data.shape[0]
    if mask_row.data.shape != (n,):
        raise ShapeError(
            f"mask row shape {mask_row.data.shape} does not match {n} nodes")
    return ad.hadamard(ad.reshape(mask_row, (n, 1)), x_prev)


def decode_predict(model: NodeModel, x_masked: Tensor) -> Tensor:
    """One-step prediction for the model's node from a gated snapshot."""
    n, d = model.num_nodes, model.input_dim
    if x_masked.data.shape != (n, d):
        raise ShapeError(f"masked snapshot must be ({n}, {d}), got {x_masked.data.shape}")
    h = mlp_forward(model.dec_rl, x_masked)
    z = blocks.ngcn_row_forward(model.dec_ngcn, model.index, h)
    return ad.reshape(mlp_forward(model.tip, ad.reshape(z, (model.hidden,))), (d,))


# ---------------------------------------------------------------------------
# stacked parameters for the batched path


_GRU_FIELDS = ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"]


@dataclass
class ParamStack:
    """Node parameters stacked on a leading axis (GRU: node-major pairs)."""

    gru: dict  # field -> (B, ...) array, B = N * N (or N when encoder shared)
    enc_w: np.ndarray  # (N, h, h) or (1, h, h) when shared
    mmg_w1: np.ndarray  # (N, N*h, h)
    mmg_b1: np.ndarray  # (N, 1, h)
    mmg_w2: np.ndarray  # (N, h, N)
    mmg_b2: np.ndarray  # (N, 1, N)
    rl_w: np.ndarray  # (N, d, h)
    rl_b: np.ndarray  # (N, 1, h)
    ngcn_w: np.ndarray  # (N, h, h)
    tip_w1: np.ndarray  # (N, h, h)
    tip_b1: np.ndarray  # (N, 1, h)
    tip_w2: np.ndarray  # (N, h, d)
    tip_b2: np.ndarray  # (N, 1, d)
    prop: np.ndarray  # constant normalized adjacency (N, N)
    shared_encoder: bool = False
    enc_phi: str = "tanh"
    mmg_hidden: str = "tanh"
    rl_act: str = "tanh"
    ngcn_phi: str = "tanh"
    tip_hidden: str = "tanh"

    def arrays(self) -> dict:
        out = {f"gru.{k}": v for k, v in self.gru.items()}
        for name in ("enc_w", "mmg_w1", "mmg_b1", "mmg_w2", "mmg_b2", "rl_w", "rl_b",
                     "ngcn_w", "tip_w1", "tip_b1", "tip_w2", "tip_b2"):
            out[name] = getattr(self, name)
        return out


def stack_params(models: list) -> ParamStack:
    n = models[0].num_nodes
    shared = len(models) > 1 and models[1].gru_bank is models[0].gru_bank
    if shared:
        gru_cells = models[0].gru_bank
        enc_w = models[0].enc_gcn.w[None]
    else:
        gru_cells = [m.gru_bank[j] for m in models for j in range(n)]
        enc_w = np.stack([m.enc_gcn.w for m in models])
    gru = {f: np.stack([getattr(c, f) for c in gru_cells]) for f in _GRU_FIELDS}
    return ParamStack(
        gru=gru,
        enc_w=enc_w,
        mmg_w1=np.stack([m.mmg.weights[0] for m in models]),
        mmg_b1=np.stack([m.mmg.biases[0][None, :] for m in models]),
        mmg_w2=np.stack([m.mmg.weights[1] for m in models]),
        mmg_b2=np.stack([m.mmg.biases[1][None, :] for m in models]),
        rl_w=np.stack([m.dec_rl.weights[0] for m in models]),
        rl_b=np.stack([m.dec_rl.biases[0][None, :] for m in models]),
        ngcn_w=np.stack([m.dec_ngcn.w for m in models]),
        tip_w1=np.stack([m.tip.weights[0] for m in models]),
        tip_b1=np.stack([m.tip.biases[0][None, :] for m in models]),
        tip_w2=np.stack([m.tip.weights[1] for m in models]),
        tip_b2=np.stack([m.tip.biases[1][None, :] for m in models]),
        prop=models[0].enc_gcn.prop.copy(),
        shared_encoder=shared,
        enc_phi=models[0].enc_gcn.phi,
        mmg_hidden=models[0].mmg.hidden_act,
        rl_act=models[0].dec_rl.out_act,
        ngcn_phi=models[0].dec_ngcn.phi,
        tip_hidden=models[0].tip.hidden_act,
    )


def unstack_params(stack: ParamStack, models: list) -> None:
    """Write stacked arrays back into the node models (training epilogue)."""
    n = models[0].num_nodes
    for i, m in enumerate(models):
        if not stack.shared_encoder:
            for j in range(n):
                for f in _GRU_FIELDS:
                    setattr(m.gru_bank[j], f, stack.gru[f][i * n + j])
            m.enc_gcn.w = stack.enc_w[i]
        m.mmg.weights[0] = stack.mmg_w1[i]
        m.mmg.biases[0] = stack.mmg_b1[i, 0]
        m.mmg.weights[1] = stack.mmg_w2[i]
        m.mmg.biases[1] = stack.mmg_b2[i, 0]
        m.dec_rl.weights[0] = stack.rl_w[i]
        m.dec_rl.biases[0] = stack.rl_b[i, 0]
        m.dec_ngcn.w = stack.ngcn_w[i]
        m.tip.weights[0] = stack.tip_w1[i]
        m.tip.biases[0] = stack.tip_b1[i, 0]
        m.tip.weights[1] = stack.tip_w2[i]
        m.tip.biases[1] = stack.tip_b2[i, 0]
    if stack.shared_encoder:
        for j in range(n):
            for f in _GRU_FIELDS:
                setattr(models[0].gru_bank[j], f, stack.gru[f][j])
        models[0].enc_gcn.w = stack.enc_w[0]


@dataclass
class BatchedOutput:
    masks: Tensor  # (n_nodes, S*(T-1), N) gate rows, node-major
    predictions: Tensor  # (n_nodes, S*(T-1), d)
    leaves: dict  # parameter name -> leaf Tensor
    tape: Tape
    num_samples: int
    num_transitions: int


def batched_forward(stack: ParamStack, x: np.ndarray, tape: Tape,
                    node_slice: slice | None = None,
                    mask_override: np.ndarray | None = None) -> BatchedOutput:
    """Forward pass over every (sample, transition) for a set of nodes.

    ``x`` is the full (S, N, T, d) series; ``node_slice`` restricts which
    node models run (their parameters slice along the stacked axis), while
    every node's series still feeds the encoder and decoder inputs.
    """
    if x.ndim != 4:
        raise ShapeError(f"series must be (S, N, T, d), got {x.shape}")
    s_count, n, t_len, d = x.shape
    if t_len < 2:
        raise ShapeError("need at least 2 time steps")
    tt = t_len - 1
    sl = node_slice or slice(0, n)
    node_ids = range(*sl.indices(n))
    n_i = len(node_ids)
    h = stack.rl_w.shape[2]
    g = s_count * tt

    leaves = {}
    shared = stack.shared_encoder
    full = n_i == n and list(node_ids) == list(range(n))
    for name, arr in stack.arrays().items():
        if name.startswith("gru.") and not shared and not full:
            rows = np.concatenate([np.arange(i * n, (i + 1) * n) for i in node_ids])
            leaves[name] = tape.leaf(arr[rows])
        elif (name.startswith("gru.") or name == "enc_w") and shared:
            leaves[name] = tape.leaf(arr)
        elif name.startswith("gru."):
            leaves[name] = tape.leaf(arr)
        else:
            leaves[name] = tape.leaf(arr[sl])

    # ---- encoder: GRU bank over the first T-1 steps, one call per sample
    b = n if shared else n_i * n
    h0 = tape.constant(np.zeros((b, h)))
    gru_args = [leaves[f"gru.{f}"] for f in _GRU_FIELDS]
    hs_parts = []
    for s in range(s_count):
        if shared:
            x_seq = np.ascontiguousarray(x[s, :, :tt, :].transpose(1, 0, 2))  # (tt, N, d)
        else:
            base = x[s, :, :tt, :].transpose(1, 0, 2)  # (tt, N_j, d)
            x_seq = np.ascontiguousarray(
                np.broadcast_to(base[:, None, :, :], (tt, n_i, n, d)).reshape(tt, b, d))
        hs_parts.append(gru_sequence(tape.constant(x_seq), h0, *gru_args))
    hs = ad.concat(hs_parts, axis=0) if s_count > 1 else hs_parts[0]  # (S*tt, b, h)

    if shared:
        hs = ad.reshape(hs, (1, g, n, h))  # broadcasts over the node axis below
    else:
        hs = ad.reshape(hs, (s_count, tt, n_i, n, h))
        hs = ad.transpose(hs, (2, 0, 1, 3, 4))
        hs = ad.reshape(hs, (n_i, g, n, h))

    prop_c = tape.constant(stack.prop)
    mixed = ad.matmul(prop_c, hs)  # (n_i|1, g, N, h)
    lead = 1 if shared else n_i
    # flatten (g, N) so the per-node weight product is one wide dgemm per node
    z = blocks.ACTIVATIONS[stack.enc_phi](
        ad.matmul(ad.reshape(mixed, (lead, g * n, h)), leaves["enc_w"]))
    if shared:
        # materialize the node axis before the per-node MMG weights
        z = ad.hadamard(ad.reshape(z, (1, g, n * h)),
                        tape.constant(np.ones((n_i, 1, 1))))
    z_flat = ad.reshape(z, (n_i, g, n * h))
    a1 = blocks.ACTIVATIONS[stack.mmg_hidden](
        ad.add(ad.matmul(z_flat, leaves["mmg_w1"]), leaves["mmg_b1"]))
    mask_pre = ad.add(ad.matmul(a1, leaves["mmg_w2"]), leaves["mmg_b2"])
    masks = ad.sigmoid(mask_pre)  # (n_i, g, N)

    # ---- decoder on gated snapshots
    x_prev = np.ascontiguousarray(
        x[:, :, :tt, :].transpose(0, 2, 1, 3).reshape(1, g, n, d))
    gate = masks if mask_override is None else tape.constant(
        np.broadcast_to(mask_override, (n_i, g, n)).copy())
    x_tilde = ad.hadamard(ad.reshape(gate, (n_i, g, n, 1)), tape.constant(x_prev))
    h_dec = blocks.ACTIVATIONS[stack.rl_act](
        ad.add(ad.matmul(ad.reshape(x_tilde, (n_i, g * n, d)), leaves["rl_w"]),
               leaves["rl_b"]))
    h_dec = ad.reshape(h_dec, (n_i, g, n, h))
    row_sel = stack.prop[list(node_ids)].reshape(n_i, 1, n, 1)
    pooled = ad.sum_axis(ad.hadamard(h_dec, tape.constant(row_sel)), (2,))  # (n_i, g, h)
    z_dec = blocks.ACTIVATIONS[stack.ngcn_phi](ad.matmul(pooled, leaves["ngcn_w"]))
    t1 = blocks.ACTIVATIONS[stack.tip_hidden](
        ad.add(ad.matmul(z_dec, leaves["tip_w1"]), leaves["tip_b1"]))
    x_hat = ad.add(ad.matmul(t1, leaves["tip_w2"]), leaves["tip_b2"])  # (n_i, g, d)

    return BatchedOutput(masks=masks, predictions=x_hat, leaves=leaves, tape=tape,
                         num_samples=s_count, num_transitions=tt)


def masks_to_series(masks_data: np.ndarray, s_count: int, tt: int) -> np.ndarray:
    """(n, S*tt, N) node-major gate rows -> (S, tt, N, N) mask matrices."""
    n = masks_data.shape[0]
    return masks_data.reshape(n, s_count, tt, -1).transpose(1, 2, 0, 3)


def predictions_to_series(pred_data: np.ndarray, s_count: int, tt: int) -> np.ndarray:
    n, _, d = pred_data.shape
    return pred_data.reshape(n, s_count, tt, d).transpose(1, 2, 0, 3)


@dataclass
class CausalMaskSeries:
    """(S, T-1, N, N) gate values; entry [s, t, i, j] gates j's influence on i."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 4 or v.shape[2] != v.shape[3]:
            raise ShapeError(f"mask series must be (S, T-1, N, N), got {v.shape}")
        if v.size and (v.min() <= 0.0 or v.max() >= 1.0):
            raise ValueError("mask entries must lie strictly inside (0, 1)")
        self.values = v

    @property
    def num_nodes(self) -> int:
        return self.values.shape[2]


@dataclass
class Prediction:
    """(S, T-1, N, d) one-step-ahead forecasts."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 4:
            raise ShapeError(f"predictions must be (S, T-1, N, d), got {v.shape}")
        if v.size and not np.all(np.isfinite(v)):
            raise ValueError("predictions contain non-finite values")
        self.values = v


def forward_full(models: list, x: np.ndarray,
                 mask_override: np.ndarray | None = None):
    """Masks and one-step predictions for every sample, node and transition."""
    x = np.asarray(x, dtype=np.float64)
    stack = stack_params(models)
    tape = Tape()
    out = batched_forward(stack, x, tape, mask_override=mask_override)
    mask_series = masks_to_series(out.masks.data, out.num_samples, out.num_transitions)
    preds = predictions_to_series(out.predictions.data, out.num_samples, out.num_transitions)
    if mask_override is not None:
        return mask_series, Prediction(values=preds)
    return CausalMaskSeries(values=mask_series), Prediction(values=preds)
