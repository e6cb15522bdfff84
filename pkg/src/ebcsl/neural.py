"""Small float64 networks, action heads and checkpoint I/O.

Autograd and the adaptive-moment optimizer come from torch; the heads
implement the exact likelihoods the PPO ratios need.
"""
from __future__ import annotations

import itertools
import math
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


class Mlp(nn.Module):
    """tanh hidden layers, linear output."""

    def __init__(self, layer_sizes, output_gain: float = 1.0, seed: int | None = None):
        super().__init__()
        if len(layer_sizes) < 2:
            raise ValueError("an Mlp needs at least input and output sizes")
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(self.layer_sizes, self.layer_sizes[1:]))
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        with torch.no_grad():
            for i, layer in enumerate(self.layers):
                gain = output_gain if i == len(self.layers) - 1 else math.sqrt(2.0)
                _orthogonal_(layer.weight, gain, gen)
                layer.bias.zero_()

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[-1]} != {self.in_dim}")
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
        return self.layers[-1](x)


def _orthogonal_(w: torch.Tensor, gain: float, gen):
    rows, cols = w.shape
    flat = torch.randn(max(rows, cols), min(rows, cols), dtype=DTYPE, generator=gen)
    q, r = torch.linalg.qr(flat)
    q = q * torch.sign(torch.diagonal(r))
    if rows < cols:
        q = q.T
    w.copy_(gain * q[:rows, :cols])


def forward(net: Mlp, x) -> np.ndarray:
    """Evaluate ``net`` on a numpy input without tracking gradients."""
    with torch.no_grad():
        return net(torch.as_tensor(np.asarray(x, dtype=float))).numpy()


class MlpSnapshot:
    """Frozen numpy copy of an :class:`Mlp` for fast rollout inference."""

    def __init__(self, net: Mlp):
        self.layers = [(l.weight.detach().numpy().T.copy(), l.bias.detach().numpy().copy())
                       for l in net.layers]
        self.in_dim = net.in_dim

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[-1]} != {self.in_dim}")
        for W, b in self.layers[:-1]:
            x = np.tanh(x @ W + b)
        W, b = self.layers[-1]
        return x @ W + b


def gradients(loss: torch.Tensor, params) -> list[torch.Tensor]:
    """Reverse-mode gradients of a scalar loss."""
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    params = list(params)
    return list(torch.autograd.grad(loss, params, allow_unused=True))


# ---------------------------------------------------------------------- power head
class SquashedGaussianHead(nn.Module):
    """Gaussian in pre-squash space mapped onto ``[lo, hi]`` with tanh.

    ``a = lo + (hi - lo) * (tanh(z) + 1) / 2``; the log-density includes the
    change of variables so it integrates to one over ``(lo, hi)``.
    """

    def __init__(self, action_dim: int = 1, init_log_std: float = math.log(0.5)):
        super().__init__()
        self.log_std = nn.Parameter(torch.full((action_dim,), init_log_std, dtype=DTYPE))

    def std(self):
        return torch.exp(self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX))

    @staticmethod
    def squash(z, lo, hi):
        return lo + (hi - lo) * (np.tanh(z) + 1.0) / 2.0

    def sample(self, mean: np.ndarray, lo, hi, rng: np.random.Generator, greedy: bool = False):
        """Draw actions; returns ``(action, z, log_prob)`` as numpy arrays."""
        mean = np.asarray(mean, dtype=float)
        lo = np.broadcast_to(np.asarray(lo, dtype=float), mean.shape)
        hi = np.broadcast_to(np.asarray(hi, dtype=float), mean.shape)
        if np.any(lo >= hi):
            raise ValueError("squashed head needs lo < hi")
        log_std = np.clip(self.log_std.detach().numpy(), LOG_STD_MIN, LOG_STD_MAX)
        z = mean if greedy else mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        a = self.squash(z, lo, hi)
        # keep strictly inside the interval when tanh saturates in float64
        a = np.clip(a, np.nextafter(lo, hi), np.nextafter(hi, lo))
        return a, z, squashed_log_prob(mean, z, lo, hi, log_std)

    def log_prob(self, mean, z, lo, hi):
        std = self.std()
        log_std = torch.log(std)
        gauss = -0.5 * ((z - mean) / std) ** 2 - log_std - 0.5 * math.log(2 * math.pi)
        # log(1 - tanh(z)^2) computed without cancellation
        log_dtanh = 2.0 * (math.log(2.0) - z - nn.functional.softplus(-2.0 * z))
        return gauss - log_dtanh - torch.log((hi - lo) / 2.0)

    def entropy_proxy(self):
        return self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX).sum()


def squashed_log_prob(mean, z, lo, hi, log_std) -> np.ndarray:
    """Numpy twin of :meth:`SquashedGaussianHead.log_prob`."""
    gauss = -0.5 * ((z - mean) / np.exp(log_std)) ** 2 - log_std - 0.5 * math.log(2 * math.pi)
    log_dtanh = 2.0 * (math.log(2.0) - z - np.logaddexp(0.0, -2.0 * z))
    return gauss - log_dtanh - np.log((hi - lo) / 2.0)


def gaussian_sample_logprob(head: SquashedGaussianHead, mean, bounds, rng, greedy=False):
    lo, hi = bounds
    a, _, lp = head.sample(np.atleast_1d(mean), lo, hi, rng, greedy)
    return a, lp


# ---------------------------------------------------------------------- allocation heads
class OptionTable:
    """All 0/1 allocations of ``M`` EBs using at most ``N`` chargers.

    Ordered by number of chargers used, then lexicographically by the
    indices of the allocated EBs; index 0 is the all-zero allocation.
    """

    def __init__(self, M: int, N: int):
        self.M, self.N = M, N
        rows = []
        for k in range(min(N, M) + 1):
            for combo in itertools.combinations(range(M), k):
                bits = np.zeros(M, dtype=int)
                bits[list(combo)] = 1
                rows.append(bits)
        self.options = np.array(rows, dtype=int).reshape(len(rows), M)
        self._index = {tuple(r): i for i, r in enumerate(self.options)}
        self._masks = {}

    def __len__(self):
        return len(self.options)

    def index(self, bits) -> int:
        return self._index[tuple(int(b) for b in bits)]

    def feasible_mask(self, status) -> np.ndarray:
        key = tuple(int(b) for b in status)
        mask = self._masks.get(key)
        if mask is None:
            mask = ~np.any(self.options * (1 - np.asarray(key, dtype=int)), axis=1)
            mask.setflags(write=False)
            self._masks[key] = mask
        return mask


ENUM_CAP = 12


class AllocationHead:
    """Distribution over charger allocations.

    ``enumeration`` mode scores every allocation in an :class:`OptionTable`
    and masks the infeasible ones; ``sequential`` mode is a Plackett-Luce
    draw of laying EBs plus a STOP token. Sequential log-likelihoods are
    for the resulting *set*: all pick orders are summed out.
    """

    def __init__(self, M: int, N: int, mode: str | None = None):
        if mode is None:
            mode = "enumeration" if M <= ENUM_CAP else "sequential"
        if mode not in ("enumeration", "sequential"):
            raise ValueError(f"unknown allocation head mode {mode!r}")
        if mode == "enumeration" and M > ENUM_CAP:
            raise ValueError(f"enumeration head limited to {ENUM_CAP} EBs")
        self.M, self.N, self.mode = M, N, mode
        self.table = OptionTable(M, N) if mode == "enumeration" else None

    @property
    def out_dim(self) -> int:
        return len(self.table) if self.mode == "enumeration" else self.M + 1

    # -- enumeration ---------------------------------------------------
    def option_log_probs(self, logits, mask):
        """Log-probabilities over the table; infeasible entries are -inf."""
        masked = logits.masked_fill(~mask, -math.inf)
        return masked - torch.logsumexp(masked, dim=-1, keepdim=True)

    # -- shared ----------------------------------------------------------
    def sample(self, logits: np.ndarray, status, rng: np.random.Generator, greedy=False):
        """Return ``(bits, log_prob)``; never emits an infeasible allocation."""
        status = np.asarray(status, dtype=int)
        if self.mode == "enumeration":
            lp = masked_log_softmax(logits, self.table.feasible_mask(status))
            if greedy:
                j = int(np.argmax(lp))
            else:
                j = int(rng.choice(lp.size, p=_normalized(np.exp(lp))))
            return self.table.options[j].copy(), float(lp[j])
        bits = np.zeros(self.M, dtype=int)
        avail = list(np.flatnonzero(status == 1))
        for _ in range(self.N):
            cand = avail + [self.M]
            s = np.asarray(logits)[cand]
            p = np.exp(s - s.max())
            p /= p.sum()
            j = int(np.argmax(p)) if greedy else int(rng.choice(len(cand), p=p))
            if cand[j] == self.M:
                break
            bits[cand[j]] = 1
            avail.remove(cand[j])
        with torch.no_grad():
            lp = float(self.log_prob(torch.as_tensor(logits), bits, status))
        return bits, lp

    def log_prob(self, logits, bits, status):
        """Differentiable log-probability of one allocation."""
        bits = np.asarray(bits, dtype=int)
        status = np.asarray(status, dtype=int)
        if self.mode == "enumeration":
            mask = torch.from_numpy(self.table.feasible_mask(status).copy())
            return self.option_log_probs(logits, mask)[self.table.index(bits)]
        return _plackett_luce_set_log_prob(logits, bits, status, self.N)

    def probabilities(self, logits: np.ndarray, status) -> tuple[np.ndarray, np.ndarray]:
        """Enumerate ``(options, probs)`` over the feasible allocations."""
        status = np.asarray(status, dtype=int)
        if self.mode == "enumeration":
            mask = self.table.feasible_mask(status)
            lp = masked_log_softmax(logits, mask)
            idx = np.flatnonzero(mask)
            return self.table.options[idx], np.exp(lp[idx])
        opts = option_space_bits(status, self.N)
        with torch.no_grad():
            lps = [float(self.log_prob(torch.as_tensor(logits), o, status)) for o in opts]
        return opts, np.exp(np.array(lps))


def masked_log_softmax(logits, mask) -> np.ndarray:
    x = np.where(mask, np.asarray(logits, dtype=float), -np.inf)
    mx = x.max()
    return x - (mx + np.log(np.sum(np.exp(x - mx))))


def option_space_bits(status, N: int) -> np.ndarray:
    status = np.asarray(status, dtype=int)
    lay = np.flatnonzero(status == 1)
    rows = []
    for k in range(min(N, lay.size) + 1):
        for combo in itertools.combinations(lay, k):
            bits = np.zeros(status.size, dtype=int)
            bits[list(combo)] = 1
            rows.append(bits)
    return np.array(rows, dtype=int).reshape(len(rows), status.size)


def _normalized(p: np.ndarray) -> np.ndarray:
    return p / p.sum()


def _plackett_luce_set_log_prob(scores, bits, status, N):
    M = bits.size
    chosen = [int(m) for m in np.flatnonzero(bits)]
    lay = [int(m) for m in np.flatnonzero(status == 1)]
    if any(m not in lay for m in chosen) or len(chosen) > N:
        return torch.tensor(-math.inf, dtype=DTYPE)
    k = len(chosen)
    stop = scores[M]
    # log f[A]: probability of having picked exactly the EBs in A (any order)
    logf = {0: torch.zeros((), dtype=DTYPE)}
    for mask in range(1 << k):
        if mask not in logf:
            continue
        picked = {chosen[i] for i in range(k) if mask >> i & 1}
        remaining = [m for m in lay if m not in picked]
        denom = torch.logsumexp(torch.stack([stop] + [scores[m] for m in remaining]), 0)
        for i in range(k):
            if mask >> i & 1:
                continue
            nxt = mask | (1 << i)
            term = logf[mask] + scores[chosen[i]] - denom
            logf[nxt] = term if nxt not in logf else torch.logaddexp(logf[nxt], term)
    full = logf[(1 << k) - 1]
    if k < N:
        remaining = [m for m in lay if m not in chosen]
        denom = torch.logsumexp(torch.stack([stop] + [scores[m] for m in remaining]), 0)
        full = full + stop - denom
    return full


def allocation_sample_logprob(head: AllocationHead, logits, status, rng, greedy=False):
    return head.sample(logits, status, rng, greedy)


# ---------------------------------------------------------------------- optimizer
class Optimizer:
    """Adam over a parameter list; refuses steps with non-finite gradients."""

    def __init__(self, params, lr: float, max_grad_norm: float | None = 0.5):
        params = list(params)
        groups = params if params and isinstance(params[0], dict) else [{"params": params}]
        self.params = [p for g in groups for p in g["params"]]
        self.lr = lr
        self.max_grad_norm = max_grad_norm
        self.opt = torch.optim.Adam(groups, lr=lr, eps=1e-8)
        self.rejected = 0

    def step(self, loss: torch.Tensor) -> bool:
        """Minimize ``loss`` by one step; returns False if the step was rejected."""
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        grads = [p.grad for p in self.params if p.grad is not None]
        if not all(torch.all(torch.isfinite(g)) for g in grads):
            self.rejected += 1
            self.opt.zero_grad(set_to_none=True)
            return False
        if self.max_grad_norm is not None:
            nn.utils.clip_grad_norm_(self.params, self.max_grad_norm)
        self.opt.step()
        return True


def optimizer_step(opt: Optimizer, params, grads) -> bool:
    """Apply externally computed gradients (descent direction)."""
    for p, g in zip(params, grads):
        p.grad = None if g is None else g.detach().clone()
    grads = [p.grad for p in opt.params if p.grad is not None]
    if not all(torch.all(torch.isfinite(g)) for g in grads):
        opt.rejected += 1
        opt.opt.zero_grad(set_to_none=True)
        return False
    opt.opt.step()
    return True


# ---------------------------------------------------------------------- checkpoints
MAGIC = b"EBCSLCK\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, modules: dict[str, nn.Module], meta: dict[str, float] | None = None):
    """Write modules as ``name, layer_sizes, float64 payload`` blocks.

    Payload order is ``module.parameters()`` order, little-endian.
    """
    meta = meta or {}
    out = bytearray(MAGIC)
    out += struct.pack("<II", CHECKPOINT_VERSION, len(modules))
    for name, mod in modules.items():
        raw = name.encode()
        sizes = getattr(mod, "layer_sizes", ())
        params = [p.detach().cpu().numpy().astype("<f8").ravel() for p in mod.parameters()]
        payload = np.concatenate(params) if params else np.zeros(0, "<f8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<I", len(sizes)) + struct.pack(f"<{len(sizes)}I", *sizes)
        out += struct.pack("<Q", payload.size) + payload.tobytes()
    out += struct.pack("<I", len(meta))
    for key, val in meta.items():
        raw = key.encode()
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<d", float(val))
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path, modules: dict[str, nn.Module]) -> dict[str, float]:
    """Fill ``modules`` in place from :func:`save_checkpoint` output."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 8
    version, count = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode()
        pos += n
        (ns,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        sizes = struct.unpack_from(f"<{ns}I", buf, pos)
        pos += 4 * ns
        (size,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        payload = np.frombuffer(buf, dtype="<f8", count=size, offset=pos)
        pos += 8 * size
        mod = modules[name]
        if tuple(getattr(mod, "layer_sizes", ())) != tuple(sizes):
            raise ValueError(f"{path}: layer sizes for {name!r} do not match")
        with torch.no_grad():
            off = 0
            for p in mod.parameters():
                k = p.numel()
                p.copy_(torch.from_numpy(payload[off:off + k].copy()).reshape(p.shape))
                off += k
        if off != size:
            raise ValueError(f"{path}: payload size mismatch for {name!r}")
    meta = {}
    (nm,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    for _ in range(nm):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        key = buf[pos:pos + n].decode()
        pos += n
        (val,) = struct.unpack_from("<d", buf, pos)
        pos += 8
        meta[key] = val
    return meta
