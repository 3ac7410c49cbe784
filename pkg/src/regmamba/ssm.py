"""Selective state space operator (S6), its 2D cross-scan extension and the VSS block.

Sequences are laid out as ``(batch, K, L, D)`` where ``K`` indexes scan
directions. Parameters of a :class:`SelectiveSSM` are stacked along a leading
``n_sets`` axis (4 independent direction sets, or 1 when tied).
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SCAN_DIRECTIONS = ("row-fwd", "row-bwd", "col-fwd", "col-bwd")

# |delta * A| below this uses the Taylor form of the ZOH input matrix
SMALL_ARG = 1e-6


def _check_finite_positive(delta: torch.Tensor, *others: torch.Tensor) -> None:
    if torch.isnan(delta).any() or any(torch.isnan(o).any() for o in others):
        raise ValueError("NaN in discretization inputs")
    if (delta <= 0).any():
        raise ValueError("discretization step delta must be strictly positive")


def discretize(delta: torch.Tensor, A: torch.Tensor, B: torch.Tensor, check: bool = True):
    """Zero-order-hold discretization for a diagonal state matrix.

    ``delta`` has shape ``(..., D)``, ``A`` broadcasts against ``(..., D, N)``
    and ``B`` is either ``(..., N)`` (shared across channels) or ``(..., D, N)``.
    Returns ``(A_bar, B_bar)`` of shape ``(..., D, N)``.
    """
    if check:
        _check_finite_positive(delta, A, B)
    if B.dim() == delta.dim():
        B = B.unsqueeze(-2)
    dt = delta.unsqueeze(-1)
    dA = dt * A
    A_bar = torch.exp(dA)
    small = dA.abs() < SMALL_ARG
    safe = torch.where(small, torch.ones_like(dA), dA)
    ratio = torch.where(small, 1.0 + dA / 2.0, torch.expm1(safe) / safe)
    B_bar = ratio * dt * B
    return A_bar, B_bar


def discretize_matrix(delta: float, A: torch.Tensor, B: torch.Tensor):
    """ZOH for a dense ``(N, N)`` state matrix and a single step size."""
    if not delta > 0:
        raise ValueError("discretization step delta must be strictly positive")
    if torch.isnan(A).any() or torch.isnan(B).any():
        raise ValueError("NaN in discretization inputs")
    n = A.shape[-1]
    dA = delta * A
    A_bar = torch.linalg.matrix_exp(dA)
    eye = torch.eye(n, dtype=A.dtype, device=A.device)
    if torch.linalg.matrix_norm(dA) < SMALL_ARG:
        B_bar = (eye + dA / 2.0) @ (delta * B)
    else:
        B_bar = torch.linalg.solve(dA, A_bar - eye) @ (delta * B)
    return A_bar, B_bar


def inverse_softplus(y: torch.Tensor) -> torch.Tensor:
    return y + torch.log(-torch.expm1(-y))


class SelectiveSSM(nn.Module):
    """Parameters of one or more S6 operators.

    Holds the continuous diagonal state matrix ``A = -exp(A_log)``, the skip
    gain ``D_skip``, the input-dependent projections for ``B``, ``C`` and the
    step logits, and the step bias ``theta``. With ``selective=False`` the
    projections are replaced by constant ``B``/``C`` vectors and the step by
    ``softplus(theta)``, giving a time-invariant system.
    """

    def __init__(self, d_inner: int, d_state: int = 8, n_sets: int = 1, dt_rank: int | None = None,
                 selective: bool = True, dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        if d_inner < 1 or d_state < 1 or n_sets < 1:
            raise ValueError("d_inner, d_state and n_sets must be positive")
        self.d_inner = d_inner
        self.d_state = d_state
        self.n_sets = n_sets
        self.selective = selective
        self.dt_rank = dt_rank or max(1, math.ceil(d_inner / 16))

        K, D, N, R = n_sets, d_inner, d_state, self.dt_rank
        A = torch.arange(1, N + 1, dtype=torch.get_default_dtype()).repeat(K, D, 1)
        self.A_log = nn.Parameter(torch.log(A))
        self.D_skip = nn.Parameter(torch.ones(K, D))
        dt = torch.exp(torch.rand(K, D) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        self.theta = nn.Parameter(inverse_softplus(dt))
        if selective:
            bound = D ** -0.5
            self.x_proj = nn.Parameter(torch.empty(K, R + 2 * N, D).uniform_(-bound, bound))
            self.dt_proj = nn.Parameter(torch.empty(K, D, R).uniform_(-R ** -0.5, R ** -0.5))
        else:
            self.B_const = nn.Parameter(torch.randn(K, N) * N ** -0.5)
            self.C_const = nn.Parameter(torch.randn(K, N) * N ** -0.5)

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def zero_projections(self) -> None:
        with torch.no_grad():
            if self.selective:
                self.x_proj.zero_()
                self.dt_proj.zero_()
            else:
                self.B_const.zero_()
                self.C_const.zero_()


def _sets(x: torch.Tensor, ssm: SelectiveSSM, p: torch.Tensor) -> torch.Tensor:
    # parameter stack (n_sets, ...) -> broadcastable against x's K axis
    if ssm.n_sets != 1 and ssm.n_sets != x.shape[-3]:
        raise ValueError(f"sequence has {x.shape[-3]} directions, parameters have {ssm.n_sets} sets")
    return p


def selective_projection(x: torch.Tensor, ssm: SelectiveSSM):
    """Input-dependent ``B``, ``C`` and step ``delta`` for sequences ``x`` of shape (..., K, L, D).

    Returns ``B`` and ``C`` of shape (..., K, L, D, N) (expanded views; ``B``
    and ``C`` are shared across channels) and ``delta`` of shape (..., K, L, D).
    """
    if x.shape[-1] != ssm.d_inner:
        raise ValueError(f"channel dim {x.shape[-1]} does not match SSM d_inner {ssm.d_inner}")
    _sets(x, ssm, ssm.theta)
    N, R = ssm.d_state, ssm.dt_rank
    theta = ssm.theta.unsqueeze(-2)  # (K, 1, D)
    if ssm.selective:
        proj = torch.einsum("...kld,kcd->...klc", x, _sets(x, ssm, ssm.x_proj))
        dt_low, B, C = torch.split(proj, [R, N, N], dim=-1)
        dt_logit = torch.einsum("...klr,kdr->...kld", dt_low, ssm.dt_proj)
        # floor keeps delta strictly positive where softplus underflows
        delta = F.softplus(theta + dt_logit).clamp_min(torch.finfo(x.dtype).tiny)
    else:
        shape = x.shape[:-1] + (N,)
        B = ssm.B_const.unsqueeze(-2).expand(shape)
        C = ssm.C_const.unsqueeze(-2).expand(shape)
        delta = F.softplus(theta).expand(x.shape)
    full = x.shape + (N,)
    return B.unsqueeze(-2).expand(full), C.unsqueeze(-2).expand(full), delta


def s6_scan(x: torch.Tensor, ssm: SelectiveSSM) -> torch.Tensor:
    """Selective scan ``h_t = A_bar_t h_{t-1} + B_bar_t x_t``, ``y_t = C_t h_t + D x_t`` with ``h_0 = 0``."""
    B, C, delta = selective_projection(x, ssm)
    A = ssm.A.unsqueeze(-3)  # (K, 1, D, N)
    A_bar, B_bar = discretize(delta, A, B, check=False)
    # sequence axis first so every step reads contiguous slices
    A_bar = A_bar.movedim(-3, 0).contiguous()
    u = (B_bar * x.unsqueeze(-1)).movedim(-3, 0).contiguous()
    h = torch.zeros_like(u[0])
    states = []
    for a_t, u_t in zip(A_bar.unbind(0), u.unbind(0)):
        h = a_t * h + u_t
        states.append(h)
    H = torch.stack(states, dim=-3)
    return torch.einsum("...ldn,...ldn->...ld", H, C) + ssm.D_skip.unsqueeze(-2) * x


def naive_s6_scan(x: np.ndarray, ssm: SelectiveSSM) -> np.ndarray:
    """Literal scalar-loop recurrence in float64 numpy; used as an oracle for :func:`s6_scan`.

    ``x`` has shape (K, L, D).
    """
    x = np.asarray(x, dtype=np.float64)
    K, L, D = x.shape
    N, R = ssm.d_state, ssm.dt_rank
    A = -np.exp(ssm.A_log.detach().double().numpy())
    Dskip = ssm.D_skip.detach().double().numpy()
    theta = ssm.theta.detach().double().numpy()
    if ssm.selective:
        Wx = ssm.x_proj.detach().double().numpy()
        Wdt = ssm.dt_proj.detach().double().numpy()
    y = np.zeros_like(x)
    for k in range(K):
        ks = k if ssm.n_sets > 1 else 0
        for d in range(D):
            h = [0.0] * N
            for t in range(L):
                if ssm.selective:
                    proj = Wx[ks] @ x[k, t]
                    logit = theta[ks, d] + float(Wdt[ks, d] @ proj[:R])
                    Bt, Ct = proj[R:R + N], proj[R + N:]
                else:
                    logit = theta[ks, d]
                    Bt = ssm.B_const.detach().double().numpy()[ks]
                    Ct = ssm.C_const.detach().double().numpy()[ks]
                dt = math.log1p(math.exp(-abs(logit))) + max(logit, 0.0)
                acc = 0.0
                for n in range(N):
                    a = dt * A[ks, d, n]
                    a_bar = math.exp(a)
                    b_bar = (math.expm1(a) / a) * dt * Bt[n] if abs(a) >= SMALL_ARG else (1 + a / 2) * dt * Bt[n]
                    h[n] = a_bar * h[n] + b_bar * x[k, t, d]
                    acc += Ct[n] * h[n]
                y[k, t, d] = acc + Dskip[ks, d] * x[k, t, d]
    return y


def ssm_kernel(A_bar: torch.Tensor, B_bar: torch.Tensor, C: torch.Tensor, length: int) -> torch.Tensor:
    """Convolution kernel ``K[k] = sum_n C_n A_bar_n^k B_bar_n`` of a time-invariant diagonal SSM.

    All three inputs have shape (..., N); the result has shape (..., length).
    """
    powers = torch.arange(length, dtype=A_bar.dtype, device=A_bar.device)
    # A_bar^k via repeated products keeps A_bar == 0 exact (0**0 == 1)
    Ak = A_bar.unsqueeze(-1) ** powers
    return (C.unsqueeze(-1) * Ak * B_bar.unsqueeze(-1)).sum(-2)


def apply_ssm_kernel(kernel: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Causal convolution along the last axis: ``y_t = sum_{k<=t} K[k] x_{t-k}``."""
    L = x.shape[-1]
    n = 2 * L
    y = torch.fft.irfft(torch.fft.rfft(x, n=n) * torch.fft.rfft(kernel, n=n), n=n)
    return y[..., :L]


def ssm_kernel_form(ssm: SelectiveSSM, length: int):
    """Kernel of a non-selective :class:`SelectiveSSM`, shape (n_sets, D, length).

    Returns ``(kernel, apply)`` where ``apply(x)`` maps (..., K, L, D) sequences
    to outputs, including the skip term, for comparison against :func:`s6_scan`.
    """
    if ssm.selective:
        raise ValueError("kernel form requires time-invariant (non-selective) parameters")
    delta = F.softplus(ssm.theta)  # (K, D)
    A_bar, B_bar = discretize(delta, ssm.A, ssm.B_const, check=False)
    C = ssm.C_const.unsqueeze(-2).expand_as(A_bar)
    kernel = ssm_kernel(A_bar, B_bar, C, length)

    def apply(x: torch.Tensor) -> torch.Tensor:
        xt = x.transpose(-1, -2)  # (..., K, D, L)
        y = apply_ssm_kernel(kernel[..., : xt.shape[-1]], xt)
        return y.transpose(-1, -2) + ssm.D_skip.unsqueeze(-2) * x

    return kernel, apply


def scan_order(direction: str, height: int, width: int) -> torch.Tensor:
    """Row-major pixel index visited at each sequence position for ``direction``."""
    idx = torch.arange(height * width).reshape(height, width)
    if direction == "row-fwd":
        return idx.flatten()
    if direction == "row-bwd":
        return idx.flatten().flip(0)
    if direction == "col-fwd":
        return idx.t().flatten()
    if direction == "col-bwd":
        return idx.t().flatten().flip(0)
    raise ValueError(f"unknown scan direction {direction!r}")


def expand_scan_paths(f: torch.Tensor) -> torch.Tensor:
    """Unroll a (batch, C, H, W) map into four sequences, shape (batch, 4, H*W, C)."""
    H, W = f.shape[-2:]
    flat = f.flatten(-2)
    seqs = [flat.index_select(-1, scan_order(d, H, W).to(f.device)) for d in SCAN_DIRECTIONS]
    return torch.stack(seqs, dim=-3).transpose(-1, -2)


def merge_scan_paths(y: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Inverse-reorder each of the four (batch, 4, L, C) sequences and sum them into (batch, C, H, W)."""
    if y.shape[-2] != height * width or y.shape[-3] != len(SCAN_DIRECTIONS):
        raise ValueError(f"expected 4 sequences of length {height * width}, got shape {tuple(y.shape)}")
    out = 0
    for k, d in enumerate(SCAN_DIRECTIONS):
        inv = torch.argsort(scan_order(d, height, width)).to(y.device)
        out = out + y.select(-3, k).transpose(-1, -2).index_select(-1, inv)
    return out.unflatten(-1, (height, width))


class SS2D(nn.Module):
    """Four-direction cross scan: expand, run S6 per direction, merge by sum."""

    def __init__(self, d_inner: int, d_state: int = 8, tied: bool = False, **kwargs):
        super().__init__()
        self.tied = tied
        self.ssm = SelectiveSSM(d_inner, d_state, n_sets=1 if tied else len(SCAN_DIRECTIONS), **kwargs)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        H, W = f.shape[-2:]
        return merge_scan_paths(s6_scan(expand_scan_paths(f), self.ssm), H, W)


class VSSBlock(nn.Module):
    """Residual visual state space block on (batch, C, H, W) maps.

    ``out = f + proj(LN(SS2D(SiLU(DWConv(Linear(LN f))))) * SiLU(Linear(LN f)))``
    """

    def __init__(self, dim: int, d_state: int = 8, expand: int = 2, tied: bool = False):
        super().__init__()
        d_inner = expand * dim
        self.norm = nn.LayerNorm(dim)
        self.in_proj = nn.Linear(dim, 2 * d_inner)
        self.dwconv = nn.Conv2d(d_inner, d_inner, 3, padding=1, groups=d_inner)
        self.ss2d = SS2D(d_inner, d_state, tied=tied)
        self.out_norm = nn.LayerNorm(d_inner)
        self.out_proj = nn.Linear(d_inner, dim)

    def zero_residual(self) -> None:
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        x = self.norm(f.permute(0, 2, 3, 1))
        x, z = self.in_proj(x).chunk(2, dim=-1)
        x = F.silu(self.dwconv(x.permute(0, 3, 1, 2)))
        x = self.out_norm(self.ss2d(x).permute(0, 2, 3, 1))
        y = self.out_proj(x * F.silu(z))
        return f + y.permute(0, 3, 1, 2)
