"""Forward model and hand-written gradients.

The spatial branch runs a graph-attention convolution over the active
phase slot's sensor graph: attention logits come from the slot's node
embeddings, aggregation weights the linearly projected input windows.
The temporal branch stacks multi-scale dilated causal convolutions over
the raw window and reduces the flattened channels to a fixed width. The
two features are concatenated, layer-normalized, and mapped through a
two-layer MLP to one next-step prediction per sensor.

Adjacency patterns are treated as constants: gradients flow into the
embeddings only through the attention logits. Node-axis reductions sum
their terms in value-sorted order, which makes predictions bit-identical
under any simultaneous permutation of the sensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ModelConfig:
    n_sensors: int
    window: int = 64
    embed_dim: int = 64      # width of projected inputs and node embeddings
    spatial_dim: int = 64    # graph-attention output width
    channels: int = 8        # conv channels per kernel size
    temporal_dim: int = 32   # reduced temporal feature width
    hidden_dim: int = 128    # MLP hidden width
    kernel_sizes: tuple[int, ...] = (2, 3, 5)
    dilation: int = 1
    tcn_layers: int = 1
    slots: int = 4
    use_temporal: bool = True
    leaky_slope: float = 0.2
    ln_eps: float = 1e-5

    def validate(self) -> None:
        if self.n_sensors < 1:
            raise ValueError("n_sensors must be positive")
        if self.window < 2:
            raise ValueError("window must be >= 2")
        for name in ("embed_dim", "spatial_dim", "channels", "temporal_dim",
                     "hidden_dim", "dilation", "tcn_layers", "slots"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.kernel_sizes:
            raise ValueError("need at least one kernel size")
        if list(self.kernel_sizes) != sorted(set(self.kernel_sizes)):
            raise ValueError("kernel_sizes must be strictly increasing")
        if self.kernel_sizes[0] < 1:
            raise ValueError("kernel sizes must be >= 1")
        if self.use_temporal:
            self.conv_out_len()

    def conv_layer_dilations(self) -> list[int]:
        return [self.dilation * (1 << l) for l in range(self.tcn_layers)]

    def conv_out_len(self) -> int:
        """Sequence length left after every conv layer's causal truncation."""
        span = max(self.kernel_sizes) - 1
        length = self.window
        for q in self.conv_layer_dilations():
            length -= q * span
            if length < 1:
                raise ValueError(
                    f"window {self.window} too short for the conv receptive "
                    f"field (need > {self.window - length})"
                )
        return length

    def conv_channels_total(self) -> int:
        return len(self.kernel_sizes) * self.channels

    def temporal_flat_dim(self) -> int:
        return self.conv_channels_total() * self.conv_out_len()

    def fused_dim(self) -> int:
        return self.spatial_dim + (self.temporal_dim if self.use_temporal else 0)


# ---------------------------------------------------------------------------
# permutation-stable reductions

def _sorted_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    # summing in value order makes the result independent of input order
    return np.sort(x, axis=axis).sum(axis=axis)


def _ordered_mix(alpha: np.ndarray, features: np.ndarray) -> np.ndarray:
    """out[..., i, f] = sum_j alpha[i, j] * features[..., j, f]."""
    feat_t = np.swapaxes(features, -1, -2)
    terms = alpha[:, None, :] * feat_t[..., None, :, :]
    return _sorted_sum(terms, axis=-1)


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax restricted to `mask`; zero outside it."""
    guarded = np.where(mask, logits, -np.inf)
    row_max = guarded.max(axis=-1, keepdims=True)
    ex = np.where(mask, np.exp(guarded - row_max), 0.0)
    denom = _sorted_sum(ex, axis=-1)[..., None]
    return ex / denom


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


# ---------------------------------------------------------------------------
# forward building blocks

def _rowwise(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """x @ weight.T computed per element in a fixed reduction order.

    BLAS matmul rounds differently depending on a row's position in the
    batch; einsum does not, which keeps node-permuted inputs bit-exact.
    """
    return np.einsum("...i,oi->...o", x, weight)


def project_input(window: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Shared linear map from a raw window to a d-dim feature, per sensor."""
    return _rowwise(np.asarray(window), weight) + bias


def _attention_parts(embedding, adjacency, att_w, att_a, slope):
    n = embedding.shape[0]
    v = _rowwise(embedding, att_w)
    d_prime = v.shape[1]
    src = np.einsum("nf,f->n", v, att_a[:d_prime])
    dst = np.einsum("nf,f->n", v, att_a[d_prime:])
    raw = src[:, None] + dst[None, :]
    logits = leaky_relu(raw, slope)
    mask = (np.asarray(adjacency).T > 0) | np.eye(n, dtype=bool)
    alpha = masked_softmax(logits, mask)
    return {"v": v, "raw": raw, "logits": logits, "mask": mask, "alpha": alpha}


def attention_coefficients(embedding, adjacency, att_w, att_a, slope: float = 0.2):
    """Attention weights alpha[i, j] over j in N(i) and i itself.

    Entries outside the neighborhood are zero; each defined row sums to 1.
    `adjacency[j, i] = 1` marks j as an in-neighbor of target i.
    """
    return _attention_parts(embedding, adjacency, att_w, att_a, slope)["alpha"]


def graph_attention_forward(x_proj, alpha, att_w):
    """h_i = ReLU(sum_j alpha[i, j] * W x'_j), the self term included in alpha."""
    wx = _rowwise(x_proj, att_w)
    return relu(_ordered_mix(alpha, wx))


def dilated_conv(x, filt, dilation: int = 1) -> np.ndarray:
    """Causal valid-mode dilated convolution of a 1-D sequence.

    out(t) = sum_s filt[s] * x(t - dilation * s), defined for the input
    positions where every tap exists.
    """
    x = np.asarray(x, dtype=np.float64)
    filt = np.asarray(filt, dtype=np.float64)
    span = dilation * (len(filt) - 1)
    if x.shape[-1] <= span:
        raise ValueError(
            f"sequence of length {x.shape[-1]} shorter than receptive field {span + 1}"
        )
    out_len = x.shape[-1] - span
    out = np.zeros(x.shape[:-1] + (out_len,))
    for s, coef in enumerate(filt):
        lo = span - dilation * s
        out += coef * x[..., lo : lo + out_len]
    return out


def _conv_taps(x, kernel, dilation, base, out_len):
    """Stack the dilated input slices one kernel tap deep: (..., in_ch, c, L_out)."""
    return np.stack(
        [x[..., base - dilation * s : base - dilation * s + out_len] for s in range(kernel)],
        axis=-2,
    )


def _conv_layer_forward(x, filters, kernel_sizes, dilation):
    """x: (..., in_ch, L) -> pre-activation (..., n_kernels * C, L_out)."""
    span = max(kernel_sizes) - 1
    base = dilation * span
    out_len = x.shape[-1] - base
    if out_len < 1:
        raise ValueError(
            f"sequence of length {x.shape[-1]} shorter than receptive field {base + 1}"
        )
    outs = [
        np.einsum("oic,...icl->...ol", filters[c], _conv_taps(x, c, dilation, base, out_len))
        for c in kernel_sizes
    ]
    return np.concatenate(outs, axis=-2), base, out_len


def temporal_module_forward(window, filter_layers, dilation: int = 1):
    """Multi-scale dilated conv stack over raw windows.

    `window` is (..., N, w); `filter_layers` is a list (one entry per conv
    layer, dilation doubling after each) of {kernel_size: (C, in_ch, c)}
    filter banks. Every kernel's output is truncated to the receptive
    field of the largest kernel, keeping the most recent positions, then
    channels are concatenated and passed through ReLU. Returns the
    features flattened to (..., N, channels * L_out).
    """
    x = np.asarray(window, dtype=np.float64)[..., None, :]
    q = dilation
    for filters in filter_layers:
        pre, _, _ = _conv_layer_forward(x, filters, sorted(filters), q)
        x = relu(pre)
        q *= 2
    return x.reshape(x.shape[:-2] + (-1,))


def _layer_norm_mlp(fused, params, ln_eps):
    mu = fused.mean(-1, keepdims=True)
    var = fused.var(-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + ln_eps)
    xhat = (fused - mu) * inv_std
    y_ln = params["ln_gain"] * xhat + params["ln_bias"]
    z1 = _rowwise(y_ln, params["mlp_w1"]) + params["mlp_b1"]
    z1_mask = z1 > 0
    r1 = np.where(z1_mask, z1, 0.0)
    pred = np.einsum("...h,h->...", r1, params["mlp_w2"]) + params["mlp_b2"]
    return {
        "xhat": xhat, "inv_std": inv_std, "y_ln": y_ln,
        "z1_mask": z1_mask, "r1": r1, "pred": pred,
    }


def fuse_and_predict(h_s, h_t, params, ln_eps: float = 1e-5):
    """[h_t || h_s] -> LayerNorm -> 2-layer MLP -> per-node scalar.

    `h_t` may be None when the temporal branch is disabled.
    """
    fused = h_s if h_t is None else np.concatenate([h_t, h_s], axis=-1)
    return _layer_norm_mlp(fused, params, ln_eps)["pred"]


# ---------------------------------------------------------------------------
# full model

@dataclass
class ForwardTrace:
    """Retained intermediates of one batched forward pass.

    `groups` holds one dict per phase slot present in the batch, with the
    original batch indices plus the attention internals (alpha, logits),
    spatial/temporal features, and MLP activations needed for backward.
    """

    groups: list[dict] = field(default_factory=list)
    batch: int = 0


class Model:
    """Owns shapes, initialization, forward, and backward."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config

    # -- parameters --------------------------------------------------------

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        cfg = self.config
        shapes: dict[str, tuple[int, ...]] = {
            "proj_w": (cfg.embed_dim, cfg.window),
            "proj_b": (cfg.embed_dim,),
        }
        for s in range(cfg.slots):
            shapes[f"emb_{s}"] = (cfg.n_sensors, cfg.embed_dim)
        shapes["att_w"] = (cfg.spatial_dim, cfg.embed_dim)
        shapes["att_a"] = (2 * cfg.spatial_dim,)
        if cfg.use_temporal:
            in_ch = 1
            for l in range(cfg.tcn_layers):
                for c in cfg.kernel_sizes:
                    shapes[f"conv{l}_k{c}"] = (cfg.channels, in_ch, c)
                in_ch = cfg.conv_channels_total()
            shapes["tred_w"] = (cfg.temporal_dim, cfg.temporal_flat_dim())
            shapes["tred_b"] = (cfg.temporal_dim,)
        fd = cfg.fused_dim()
        shapes["ln_gain"] = (fd,)
        shapes["ln_bias"] = (fd,)
        shapes["mlp_w1"] = (cfg.hidden_dim, fd)
        shapes["mlp_b1"] = (cfg.hidden_dim,)
        shapes["mlp_w2"] = (cfg.hidden_dim,)
        shapes["mlp_b2"] = ()
        return shapes

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        cfg = self.config
        params: dict[str, np.ndarray] = {}
        for name, shape in self.param_shapes().items():
            if name in ("proj_b", "tred_b", "ln_bias", "mlp_b1", "mlp_b2"):
                params[name] = np.zeros(shape)
            elif name == "ln_gain":
                params[name] = np.ones(shape)
            else:
                if name == "proj_w":
                    fan_in = cfg.window
                elif name.startswith("emb_") or name == "att_w":
                    fan_in = cfg.embed_dim
                elif name == "att_a":
                    fan_in = 2 * cfg.spatial_dim
                elif name.startswith("conv"):
                    fan_in = shape[1] * shape[2]
                elif name == "tred_w":
                    fan_in = cfg.temporal_flat_dim()
                elif name == "mlp_w1":
                    fan_in = cfg.fused_dim()
                else:  # mlp_w2
                    fan_in = cfg.hidden_dim
                bound = 1.0 / np.sqrt(fan_in)
                params[name] = rng.uniform(-bound, bound, shape)
        return params

    # -- forward -----------------------------------------------------------

    def forward(self, windows, slot_ids, adjacencies, params):
        """windows (B, N, w); slot_ids (B,); adjacencies: one per slot.

        Returns (predictions (B, N), ForwardTrace).
        """
        cfg = self.config
        windows = np.asarray(windows, dtype=np.float64)
        slot_ids = np.asarray(slot_ids)
        batch = windows.shape[0]
        if windows.shape[1:] != (cfg.n_sensors, cfg.window):
            raise ValueError(
                f"windows shaped {windows.shape}, expected "
                f"(B, {cfg.n_sensors}, {cfg.window})"
            )
        preds = np.empty((batch, cfg.n_sensors))
        trace = ForwardTrace(batch=batch)
        for slot in np.unique(slot_ids):
            idx = np.flatnonzero(slot_ids == slot)
            group = self._forward_group(windows[idx], int(slot), adjacencies[int(slot)], params)
            group["idx"] = idx
            group["slot"] = int(slot)
            preds[idx] = group["pred"]
            trace.groups.append(group)
        return preds, trace

    def _forward_group(self, xw, slot, adjacency, params):
        cfg = self.config
        b, n, _ = xw.shape
        xp = project_input(xw, params["proj_w"], params["proj_b"])
        att = _attention_parts(
            params[f"emb_{slot}"], adjacency, params["att_w"], params["att_a"],
            cfg.leaky_slope,
        )
        wx = _rowwise(xp, params["att_w"])
        pre_s = _ordered_mix(att["alpha"], wx)
        s_mask = pre_s > 0
        h_s = np.where(s_mask, pre_s, 0.0)

        conv_layers = None
        t_flat = None
        if cfg.use_temporal:
            conv_layers = []
            x = xw[..., None, :]
            for l, q in enumerate(cfg.conv_layer_dilations()):
                filters = {c: params[f"conv{l}_k{c}"] for c in cfg.kernel_sizes}
                pre, base, out_len = _conv_layer_forward(x, filters, cfg.kernel_sizes, q)
                mask = pre > 0
                conv_layers.append(
                    {"x": x, "mask": mask, "dilation": q, "base": base, "out_len": out_len}
                )
                x = np.where(mask, pre, 0.0)
            t_flat = x.reshape(b, n, -1)
            t_red = _rowwise(t_flat, params["tred_w"]) + params["tred_b"]
            fused = np.concatenate([t_red, h_s], axis=-1)
        else:
            fused = h_s

        head = _layer_norm_mlp(fused, params, cfg.ln_eps)
        return {
            "window": xw, "x_proj": xp, "att": att, "wx": wx,
            "s_mask": s_mask, "h_s": h_s, "conv": conv_layers, "t_flat": t_flat,
            **head,
        }

    def predict(self, windows, slot_ids, adjacencies, params, chunk_size: int = 256):
        """Forward without keeping traces; chunked to bound memory."""
        windows = np.asarray(windows, dtype=np.float64)
        out = np.empty((windows.shape[0], self.config.n_sensors))
        for lo in range(0, windows.shape[0], chunk_size):
            hi = lo + chunk_size
            preds, _ = self.forward(windows[lo:hi], slot_ids[lo:hi], adjacencies, params)
            out[lo:hi] = preds
        return out

    # -- backward ----------------------------------------------------------

    def backward(self, trace: ForwardTrace, d_preds, params):
        """Gradients for every parameter given d(loss)/d(predictions)."""
        if not trace.groups:
            raise ValueError("backward called without a forward trace")
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        for group in trace.groups:
            self._backward_group(group, d_preds[group["idx"]], params, grads)
        return grads

    def _backward_group(self, g, dpred, params, grads):
        cfg = self.config
        b, n = dpred.shape

        # output MLP
        grads["mlp_w2"] += np.einsum("bn,bnh->h", dpred, g["r1"])
        grads["mlp_b2"] += dpred.sum()
        dz1 = (dpred[..., None] * params["mlp_w2"]) * g["z1_mask"]
        grads["mlp_w1"] += np.einsum("bnh,bnf->hf", dz1, g["y_ln"])
        grads["mlp_b1"] += dz1.sum((0, 1))
        dy = dz1 @ params["mlp_w1"]

        # layer norm
        xhat = g["xhat"]
        grads["ln_gain"] += (dy * xhat).sum((0, 1))
        grads["ln_bias"] += dy.sum((0, 1))
        gg = dy * params["ln_gain"]
        dfused = g["inv_std"] * (
            gg
            - gg.mean(-1, keepdims=True)
            - xhat * (gg * xhat).mean(-1, keepdims=True)
        )

        # split the fused vector back into branches
        if cfg.use_temporal:
            td = cfg.temporal_dim
            dt_red = dfused[..., :td]
            dh_s = dfused[..., td:]
            grads["tred_w"] += np.einsum("bnt,bnf->tf", dt_red, g["t_flat"])
            grads["tred_b"] += dt_red.sum((0, 1))
            d_act = (dt_red @ params["tred_w"]).reshape(
                b, n, cfg.conv_channels_total(), cfg.conv_out_len()
            )
            for l in reversed(range(cfg.tcn_layers)):
                layer = g["conv"][l]
                dpre = d_act * layer["mask"]
                q, base, out_len = layer["dilation"], layer["base"], layer["out_len"]
                x_in = layer["x"]
                dx = np.zeros_like(x_in) if l > 0 else None
                off = 0
                for c in cfg.kernel_sizes:
                    dpre_c = dpre[..., off : off + cfg.channels, :]
                    off += cfg.channels
                    taps = _conv_taps(x_in, c, q, base, out_len)
                    grads[f"conv{l}_k{c}"] += np.einsum("bnol,bnicl->oic", dpre_c, taps)
                    if dx is not None:
                        filt = params[f"conv{l}_k{c}"]
                        for s in range(c):
                            lo = base - q * s
                            dx[..., lo : lo + out_len] += np.einsum(
                                "oi,bnol->bnil", filt[:, :, s], dpre_c
                            )
                if dx is not None:
                    d_act = dx
        else:
            dh_s = dfused

        # spatial branch: aggregation, then attention back to embeddings
        dpre_s = dh_s * g["s_mask"]
        alpha = g["att"]["alpha"]
        dalpha = np.einsum("bif,bjf->ij", dpre_s, g["wx"])
        dwx = np.einsum("ij,bif->bjf", alpha, dpre_s)
        grads["att_w"] += np.einsum("bnf,bnd->fd", dwx, g["x_proj"])
        dxp = dwx @ params["att_w"]

        dlogit = alpha * (dalpha - (alpha * dalpha).sum(-1, keepdims=True))
        draw = dlogit * np.where(g["att"]["raw"] > 0, 1.0, cfg.leaky_slope)
        dsrc = draw.sum(axis=1)
        ddst = draw.sum(axis=0)
        d_prime = cfg.spatial_dim
        v = g["att"]["v"]
        dv = dsrc[:, None] * params["att_a"][None, :d_prime] \
            + ddst[:, None] * params["att_a"][None, d_prime:]
        grads["att_a"][:d_prime] += v.T @ dsrc
        grads["att_a"][d_prime:] += v.T @ ddst
        emb = params[f"emb_{g['slot']}"]
        grads["att_w"] += dv.T @ emb
        grads[f"emb_{g['slot']}"] += dv @ params["att_w"]

        # input projection
        grads["proj_w"] += np.einsum("bnd,bnw->dw", dxp, g["window"])
        grads["proj_b"] += dxp.sum((0, 1))
