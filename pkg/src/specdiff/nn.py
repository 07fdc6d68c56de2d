"""Learnable pieces: spectral convolution, spectral GRU, and the denoiser.

Everything here operates directly on spectral-domain node features shaped
``(..., N, C)``; leading axes are free batch dimensions.  The spectral
convolution applies Chebyshev polynomial weights of the scaled Laplacian
spectrum as a per-node diagonal scaling followed by a channel mixing, which
costs O(N) per channel pair instead of the O(N^2) of a dense graph
convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, UsageError
from .graph import FourierBasis


def chebyshev_diag(scaled_eigvals: np.ndarray, order: int) -> np.ndarray:
    """Chebyshev polynomials T_0..T_{order-1} evaluated on the spectrum.

    Returns an ``(order, N)`` matrix; row ``j`` holds ``T_j`` elementwise,
    via the recurrence ``T_0 = 1, T_1 = x, T_j = 2 x T_{j-1} - T_{j-2}``.
    """
    if order < 1:
        raise UsageError(f"order must be >= 1, got {order}")
    lam = np.asarray(scaled_eigvals, dtype=np.float64)
    out = np.empty((order, lam.shape[0]))
    out[0] = 1.0
    if order > 1:
        out[1] = lam
    for j in range(2, order):
        out[j] = 2.0 * lam * out[j - 1] - out[j - 2]
    return out


@dataclass
class SpectralConvFilter:
    """Per-order channel-mixing coefficients; ``coeffs[j]`` is (C_in, C_out)."""

    coeffs: list[Tensor]

    def __post_init__(self) -> None:
        if not self.coeffs:
            raise UsageError("a spectral filter needs at least one coefficient tensor")
        shapes = {t.shape for t in self.coeffs}
        if len(shapes) != 1:
            raise ShapeError(f"coefficient tensors disagree on channels: {shapes}")

    @property
    def order(self) -> int:
        return len(self.coeffs)

    @property
    def in_channels(self) -> int:
        return self.coeffs[0].shape[0]

    @property
    def out_channels(self) -> int:
        return self.coeffs[0].shape[1]

    def named_tensors(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(f"{prefix}phi{j}", t) for j, t in enumerate(self.coeffs)]


def spectral_conv(filt: SpectralConvFilter, basis: FourierBasis, x: Tensor) -> Tensor:
    """Sum over orders of (Chebyshev row scaling) o (channel mixing).

    ``x`` is spectral input of shape ``(..., N, C_in)``; the result has shape
    ``(..., N, C_out)``.
    """
    if x.shape[-1] != filt.in_channels:
        raise ShapeError(
            f"filter expects {filt.in_channels} channels, signal has {x.shape[-1]}"
        )
    if x.shape[-2] != basis.num_nodes:
        raise ShapeError(
            f"signal has {x.shape[-2]} nodes but the basis covers {basis.num_nodes}"
        )
    cheb = chebyshev_diag(basis.scaled_eigvals, filt.order)
    out: Tensor | None = None
    for j, phi in enumerate(filt.coeffs):
        term = ad.row_scale(ad.matmul(x, phi), cheb[j])
        out = term if out is None else ad.add(out, term)
    return out


def dense_cheb_conv(
    basis: FourierBasis, x: np.ndarray, coeffs: list[np.ndarray]
) -> np.ndarray:
    """Reference dense Chebyshev graph convolution in the original domain.

    Builds ``U diag(T_j) U^T`` explicitly per order, so it costs O(N^2).
    Used as the correctness oracle and the benchmark contrast for
    :func:`spectral_conv`.
    """
    u = basis.eigvecs
    cheb = chebyshev_diag(basis.scaled_eigvals, len(coeffs))
    out = np.zeros(x.shape[:-1] + (coeffs[0].shape[1],))
    for j, phi in enumerate(coeffs):
        mixed = (u @ (cheb[j][:, None] * (u.T @ x)))
        out += mixed @ phi
    return out


# ---------------------------------------------------------------------------
# Spectral GRU encoder
# ---------------------------------------------------------------------------


@dataclass
class GruWeights:
    """Gate weights: ``w_*1`` map the filtered input (1 channel) to the
    hidden width, ``w_*2`` mix the filtered hidden state."""

    w_z1: Tensor
    w_r1: Tensor
    w_c1: Tensor
    w_z2: Tensor
    w_r2: Tensor
    w_c2: Tensor
    hidden_size: int

    def named_tensors(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [
            (f"{prefix}w_z1", self.w_z1),
            (f"{prefix}w_r1", self.w_r1),
            (f"{prefix}w_c1", self.w_c1),
            (f"{prefix}w_z2", self.w_z2),
            (f"{prefix}w_r2", self.w_r2),
            (f"{prefix}w_c2", self.w_c2),
        ]


@dataclass
class GruFilters:
    """Spectral filters shared by the three gates."""

    input: SpectralConvFilter    # (1 + time features) -> 1
    hidden: SpectralConvFilter   # hidden -> hidden

    def named_tensors(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return self.input.named_tensors(f"{prefix}in.") + self.hidden.named_tensors(
            f"{prefix}hid."
        )


def gru_step(
    weights: GruWeights,
    filters: GruFilters,
    basis: FourierBasis,
    x_t: Tensor,
    h_prev: Tensor,
) -> Tensor:
    """One recurrent update on spectral inputs.

    Update gate ``z`` and reset gate ``r`` read the filtered input and
    previous hidden state; the candidate state mixes the reset-masked hidden
    state; the new state interpolates ``z * h_prev + (1 - z) * candidate``.
    """
    if h_prev.shape[-1] != weights.hidden_size:
        raise ShapeError(
            f"hidden state has {h_prev.shape[-1]} channels, expected {weights.hidden_size}"
        )
    sx = spectral_conv(filters.input, basis, x_t)
    sh = spectral_conv(filters.hidden, basis, h_prev)
    z = ad.sigmoid(ad.add(ad.matmul(sx, weights.w_z1), ad.matmul(sh, weights.w_z2)))
    r = ad.sigmoid(ad.add(ad.matmul(sx, weights.w_r1), ad.matmul(sh, weights.w_r2)))
    sc = spectral_conv(filters.hidden, basis, ad.mul(r, h_prev))
    cand = ad.tanh(ad.add(ad.matmul(sx, weights.w_c1), ad.matmul(sc, weights.w_c2)))
    one_minus_z = ad.sub(Tensor(np.ones(z.shape)), z)
    return ad.add(ad.mul(z, h_prev), ad.mul(one_minus_z, cand))


def zero_state(leading: tuple[int, ...], num_nodes: int, hidden_size: int) -> Tensor:
    return Tensor(np.zeros(leading + (num_nodes, hidden_size)))


def run_encoder(
    weights: GruWeights,
    filters: GruFilters,
    basis: FourierBasis,
    inputs: list[Tensor],
    h0: Tensor | None = None,
) -> list[Tensor]:
    """Unroll the GRU over a sequence of spectral inputs.

    Returns the hidden state after each step (same length as ``inputs``).
    The initial state defaults to zeros.
    """
    if not inputs:
        raise UsageError("encoder needs at least one input step")
    first = inputs[0]
    h = h0 if h0 is not None else zero_state(
        first.shape[:-2], basis.num_nodes, weights.hidden_size
    )
    states: list[Tensor] = []
    for x_t in inputs:
        h = gru_step(weights, filters, basis, x_t, h)
        states.append(h)
    return states


# ---------------------------------------------------------------------------
# Gated residual denoiser
# ---------------------------------------------------------------------------


@dataclass
class WaveBlock:
    dil_w: Tensor            # (D_r, 2 D_r) channel mixing (gate halves)
    dil_b: Tensor            # (2 D_r,)
    cond: SpectralConvFilter  # hidden -> 2 D_r conditioning path
    out_w: Tensor            # (D_r, 2 D_r) fused residual | skip projection
    out_b: Tensor            # (2 D_r,)

    def named_tensors(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}dil_w", self.dil_w), (f"{prefix}dil_b", self.dil_b)]
        out += self.cond.named_tensors(f"{prefix}cond.")
        out += [(f"{prefix}out_w", self.out_w), (f"{prefix}out_b", self.out_b)]
        return out


@dataclass
class WaveNetParams:
    """Gated residual stack over spectral node features.

    Each denoising call sees a single time point, so the classic dilated
    temporal convolution degenerates to a channel-axis linear layer.  The
    hidden condition enters every block through its own spectral filter; the
    diffusion step enters through a sinusoidal embedding and a shared MLP.
    """

    proj_w: Tensor
    proj_b: Tensor
    blocks: list[WaveBlock]
    emb_w1: Tensor
    emb_b1: Tensor
    emb_w2: Tensor
    emb_b2: Tensor
    head_w1: Tensor
    head_b1: Tensor
    head_w2: Tensor
    head_b2: Tensor
    num_steps: int
    embed_dim: int

    @property
    def residual_channels(self) -> int:
        return self.proj_w.shape[1]

    def named_tensors(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}proj_w", self.proj_w), (f"{prefix}proj_b", self.proj_b)]
        for i, blk in enumerate(self.blocks):
            out += blk.named_tensors(f"{prefix}block{i}.")
        out += [
            (f"{prefix}emb_w1", self.emb_w1),
            (f"{prefix}emb_b1", self.emb_b1),
            (f"{prefix}emb_w2", self.emb_w2),
            (f"{prefix}emb_b2", self.emb_b2),
            (f"{prefix}head_w1", self.head_w1),
            (f"{prefix}head_b1", self.head_b1),
            (f"{prefix}head_w2", self.head_w2),
            (f"{prefix}head_b2", self.head_b2),
        ]
        return out


def step_embedding(k: int | np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of the diffusion step index.

    Scalar ``k`` gives shape ``(dim,)``; an integer vector gives
    ``(len(k), dim)``.
    """
    half = dim // 2
    j = np.arange(half)
    freqs = 10.0 ** (-4.0 * j / max(half - 1, 1))
    angles = np.asarray(k, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def _check_step_range(k: int | np.ndarray, num_steps: int) -> None:
    ks = np.asarray(k)
    if ks.size == 0 or np.any(ks < 1) or np.any(ks > num_steps):
        raise UsageError(f"diffusion step {k} outside [1, {num_steps}]")


def wave_condition(wave: WaveNetParams, basis: FourierBasis, h_prev: Tensor) -> list[Tensor]:
    """Per-block conditioning projections of the hidden state.

    Exposed separately so samplers can compute it once per time point and
    reuse it across all diffusion steps and sample chains.
    """
    return [spectral_conv(blk.cond, basis, h_prev) for blk in wave.blocks]


def predict_noise(
    wave: WaveNetParams,
    basis: FourierBasis,
    x_k: Tensor,
    k: int | np.ndarray,
    h_prev: Tensor,
    cond_pre: list[Tensor] | None = None,
) -> Tensor:
    """Predict the injected noise for disturbed spectral input ``x_k``.

    ``x_k`` has shape ``(..., N, 1)``; ``k`` is the diffusion step (scalar,
    or one per leading batch entry); ``h_prev`` is the hidden condition.
    ``cond_pre`` optionally supplies precomputed :func:`wave_condition`
    outputs (must broadcast against the gate activations).
    """
    _check_step_range(k, wave.num_steps)
    two_dr = 2 * wave.residual_channels

    emb_in = step_embedding(k, wave.embed_dim)
    if emb_in.ndim == 1:
        emb = ad.reshape(
            ad.add(
                ad.matmul(
                    ad.tanh(ad.add(ad.matmul(Tensor(emb_in[None, :]), wave.emb_w1), wave.emb_b1)),
                    wave.emb_w2,
                ),
                wave.emb_b2,
            ),
            (two_dr,),
        )
    else:
        flat = ad.add(
            ad.matmul(
                ad.tanh(ad.add(ad.matmul(Tensor(emb_in), wave.emb_w1), wave.emb_b1)),
                wave.emb_w2,
            ),
            wave.emb_b2,
        )
        # (B, 2 D_r) -> (B, 1, 2 D_r) so it lines up with (B, N, 2 D_r).
        emb = ad.broadcast_to(
            ad.reshape(flat, (flat.shape[0], 1, two_dr)),
            x_k.shape[:-1] + (two_dr,),
        )

    conds = cond_pre if cond_pre is not None else wave_condition(wave, basis, h_prev)
    if len(conds) != len(wave.blocks):
        raise UsageError(f"expected {len(wave.blocks)} condition tensors, got {len(conds)}")

    d_r = wave.residual_channels
    x = ad.add(ad.matmul(x_k, wave.proj_w), wave.proj_b)
    skip: Tensor | None = None
    for blk, cond in zip(wave.blocks, conds):
        y = ad.add(ad.add(ad.add(ad.matmul(x, blk.dil_w), blk.dil_b), cond), emb)
        gate_a = ad.slice_axis(y, -1, 0, d_r)
        gate_b = ad.slice_axis(y, -1, d_r, two_dr)
        act = ad.mul(ad.tanh(gate_a), ad.sigmoid(gate_b))
        u = ad.add(ad.matmul(act, blk.out_w), blk.out_b)
        x = ad.add(x, ad.slice_axis(u, -1, 0, d_r))
        s = ad.slice_axis(u, -1, d_r, two_dr)
        skip = s if skip is None else ad.add(skip, s)

    h1 = ad.relu(skip)
    h2 = ad.relu(ad.add(ad.matmul(h1, wave.head_w1), wave.head_b1))
    return ad.add(ad.matmul(h2, wave.head_w2), wave.head_b2)


# ---------------------------------------------------------------------------
# Full parameter bundle
# ---------------------------------------------------------------------------


@dataclass
class ModelParams:
    """All learnable weights of the encoder and the denoiser."""

    gru: GruWeights
    gru_filters: GruFilters
    wave: WaveNetParams
    input_channels: int = 1

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = self.gru.named_tensors("gru.")
        out += self.gru_filters.named_tensors("gru.filters.")
        out += self.wave.named_tensors("wave.")
        return out


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], gain: float = 1.0) -> Tensor:
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    fan_out = shape[-1]
    std = gain * np.sqrt(2.0 / (fan_in + fan_out))
    return ad.param(rng.normal(0.0, std, size=shape))


def _make_filter(
    rng: np.random.Generator, order: int, c_in: int, c_out: int
) -> SpectralConvFilter:
    gain = 1.0 / np.sqrt(order)
    return SpectralConvFilter([_glorot(rng, (c_in, c_out), gain) for _ in range(order)])


def init_model(
    rng: np.random.Generator,
    input_channels: int,
    hidden_size: int,
    num_blocks: int,
    residual_channels: int,
    cheb_order: int,
    num_steps: int,
    embed_dim: int = 64,
) -> ModelParams:
    """Freshly initialized parameters (final output layer starts at zero)."""
    dh, dr = hidden_size, residual_channels
    gru = GruWeights(
        w_z1=_glorot(rng, (1, dh)),
        w_r1=_glorot(rng, (1, dh)),
        w_c1=_glorot(rng, (1, dh)),
        w_z2=_glorot(rng, (dh, dh)),
        w_r2=_glorot(rng, (dh, dh)),
        w_c2=_glorot(rng, (dh, dh)),
        hidden_size=dh,
    )
    gru_filters = GruFilters(
        input=_make_filter(rng, cheb_order, input_channels, 1),
        hidden=_make_filter(rng, cheb_order, dh, dh),
    )
    blocks = [
        WaveBlock(
            dil_w=_glorot(rng, (dr, 2 * dr)),
            dil_b=ad.param(np.zeros(2 * dr)),
            cond=_make_filter(rng, 2, dh, 2 * dr),
            out_w=_glorot(rng, (dr, 2 * dr)),
            out_b=ad.param(np.zeros(2 * dr)),
        )
        for _ in range(num_blocks)
    ]
    wave = WaveNetParams(
        proj_w=_glorot(rng, (1, dr)),
        proj_b=ad.param(np.zeros(dr)),
        blocks=blocks,
        emb_w1=_glorot(rng, (embed_dim, embed_dim)),
        emb_b1=ad.param(np.zeros(embed_dim)),
        emb_w2=_glorot(rng, (embed_dim, 2 * dr)),
        emb_b2=ad.param(np.zeros(2 * dr)),
        head_w1=_glorot(rng, (dr, dr)),
        head_b1=ad.param(np.zeros(dr)),
        head_w2=ad.param(np.zeros((dr, 1))),
        head_b2=ad.param(np.zeros(1)),
        num_steps=num_steps,
        embed_dim=embed_dim,
    )
    return ModelParams(gru=gru, gru_filters=gru_filters, wave=wave, input_channels=input_channels)


def model_meta(model: ModelParams) -> dict:
    """Structural metadata needed to rebuild the parameter containers."""
    return {
        "input_channels": model.input_channels,
        "hidden_size": model.gru.hidden_size,
        "num_blocks": len(model.wave.blocks),
        "residual_channels": model.wave.residual_channels,
        "cheb_order": model.gru_filters.input.order,
        "num_steps": model.wave.num_steps,
        "embed_dim": model.wave.embed_dim,
    }


def model_from_meta(meta: dict) -> ModelParams:
    """Build zero-filled containers matching ``meta`` (arrays loaded after)."""
    rng = np.random.default_rng(0)
    model = init_model(
        rng,
        input_channels=int(meta["input_channels"]),
        hidden_size=int(meta["hidden_size"]),
        num_blocks=int(meta["num_blocks"]),
        residual_channels=int(meta["residual_channels"]),
        cheb_order=int(meta["cheb_order"]),
        num_steps=int(meta["num_steps"]),
        embed_dim=int(meta["embed_dim"]),
    )
    return model


def model_to_arrays(model: ModelParams) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.named_tensors()}


def load_model_arrays(model: ModelParams, arrays: dict[str, np.ndarray]) -> None:
    named = dict(model.named_tensors())
    missing = sorted(set(named) - set(arrays))
    extra = sorted(set(arrays) - set(named))
    if missing or extra:
        raise UsageError(f"parameter name mismatch: missing {missing}, unexpected {extra}")
    for name, tensor in named.items():
        arr = arrays[name]
        if arr.shape != tensor.shape:
            raise ShapeError(f"parameter {name!r}: archive shape {arr.shape} != {tensor.shape}")
        tensor.data = np.asarray(arr, dtype=np.float64).copy()


def clone_model(model: ModelParams) -> ModelParams:
    """Deep copy of the parameter bundle (used for best-epoch snapshots)."""
    twin = model_from_meta(model_meta(model))
    load_model_arrays(twin, model_to_arrays(model))
    return twin
