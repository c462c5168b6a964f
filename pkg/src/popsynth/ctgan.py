"""Conditional tabular GAN for all-categorical populations.

One-hot encoding per attribute, conditional vectors with training-by-sampling,
a residual generator with gumbel-softmax heads and a packed critic trained
with the WGAN gradient-penalty objective.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core_data import DataError, Population, Provenance, Schema

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PSYNCKPT"
CHECKPOINT_VERSION = 1


class TrainingDivergence(RuntimeError):
    pass


class BudgetExhausted(DataError):
    """Generation gave up before producing enough rows that satisfy a condition."""

    def __init__(self, message: str, produced: int = 0, required: int = 0, attempts: int = 0):
        super().__init__(message)
        self.produced = produced
        self.required = required
        self.attempts = attempts


# ---------------------------------------------------------------------------
# encoding

@dataclass(frozen=True)
class Encoding:
    schema: Schema

    @property
    def spans(self) -> list[tuple[int, int]]:
        out, start = [], 0
        for a in self.schema.attributes:
            out.append((start, start + a.size))
            start += a.size
        return out

    @property
    def offsets(self) -> np.ndarray:
        return np.array([s for s, _ in self.spans], dtype=np.int64)

    @property
    def width(self) -> int:
        return sum(a.size for a in self.schema.attributes)

    def encode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        out = np.zeros((codes.shape[0], self.width), dtype=np.float32)
        rows = np.arange(codes.shape[0])[:, None]
        out[rows, codes + self.offsets[None, :]] = 1.0
        return out

    def decode(self, onehot: np.ndarray) -> np.ndarray:
        """Argmax per attribute span back to category codes."""
        onehot = np.asarray(onehot)
        return np.stack([onehot[:, s:e].argmax(axis=1) for s, e in self.spans], axis=1).astype(np.int64)


@dataclass(frozen=True)
class ConditionalVector:
    attr: int
    category: int
    width: int
    offset: int

    @property
    def vector(self) -> np.ndarray:
        v = np.zeros(self.width, dtype=np.float32)
        v[self.offset + self.category] = 1.0
        return v


class ConditionSampler:
    """Draws (attribute, category) conditions and matching training rows.

    Training conditions pick an attribute uniformly and a category with
    probability proportional to ``log(1 + count)``; unconditional generation
    uses the raw category frequencies instead.
    """

    def __init__(self, schema: Schema, counts: Sequence[Sequence[int]], codes: np.ndarray | None = None):
        self.schema = schema
        self.encoding = Encoding(schema)
        self.counts = [np.asarray(c, dtype=np.int64) for c in counts]
        self.log_probs = []
        self.freq_probs = []
        for c in self.counts:
            lw = np.log1p(c.astype(float))
            self.log_probs.append(lw / lw.sum())
            self.freq_probs.append(c / c.sum())
        self.rows = None
        if codes is not None:
            self.rows = [[np.flatnonzero(codes[:, j] == k) for k in range(len(c))] for j, c in enumerate(self.counts)]

    @classmethod
    def from_population(cls, pop: Population) -> "ConditionSampler":
        if len(pop) == 0:
            raise DataError("cannot sample conditions from an empty population")
        counts = [np.bincount(pop.codes[:, j], minlength=a.size) for j, a in enumerate(pop.schema.attributes)]
        return cls(pop.schema, counts, pop.codes)

    def sample(self, rng: np.random.Generator, n: int, log_weighted: bool = True) -> tuple[np.ndarray, np.ndarray]:
        probs = self.log_probs if log_weighted else self.freq_probs
        attrs = rng.integers(0, len(probs), size=n)
        cats = np.empty(n, dtype=np.int64)
        for j in np.unique(attrs):
            sel = np.flatnonzero(attrs == j)
            cats[sel] = rng.choice(len(probs[j]), size=sel.size, p=probs[j])
        return attrs, cats

    def cond_matrix(self, attrs: np.ndarray, cats: np.ndarray) -> np.ndarray:
        out = np.zeros((len(attrs), self.encoding.width), dtype=np.float32)
        out[np.arange(len(attrs)), self.encoding.offsets[attrs] + cats] = 1.0
        return out

    def sample_rows(self, rng: np.random.Generator, attrs: np.ndarray, cats: np.ndarray) -> np.ndarray:
        idx = np.empty(len(attrs), dtype=np.int64)
        for j, k in set(zip(attrs.tolist(), cats.tolist())):
            sel = np.flatnonzero((attrs == j) & (cats == k))
            pool = self.rows[j][k]
            idx[sel] = pool[rng.integers(0, len(pool), size=sel.size)]
        return idx


def sample_condition(training_pop: Population, rng: np.random.Generator) -> ConditionalVector:
    """One training-by-sampling condition for ``training_pop``."""
    sampler = ConditionSampler.from_population(training_pop)
    attrs, cats = sampler.sample(rng, 1)
    enc = sampler.encoding
    return ConditionalVector(int(attrs[0]), int(cats[0]), enc.width, int(enc.offsets[attrs[0]]))


# ---------------------------------------------------------------------------
# networks

class Residual(nn.Module):
    def __init__(self, i: int, o: int):
        super().__init__()
        self.fc = nn.Linear(i, o)
        self.bn = nn.BatchNorm1d(o)

    def forward(self, x):
        return torch.cat([F.relu(self.bn(self.fc(x))), x], dim=1)


class GeneratorNet(nn.Module):
    def __init__(self, z_dim: int, cond_dim: int, hidden: Sequence[int], data_dim: int):
        super().__init__()
        dim = z_dim + cond_dim
        layers = []
        for h in hidden:
            layers.append(Residual(dim, h))
            dim += h
        layers.append(nn.Linear(dim, data_dim))
        self.seq = nn.Sequential(*layers)

    def forward(self, x):
        return self.seq(x)


class CriticNet(nn.Module):
    """Scores groups of ``pac`` concatenated (row, condition) vectors."""

    def __init__(self, input_dim: int, hidden: Sequence[int], pac: int = 10):
        super().__init__()
        self.pac = pac
        self.pacdim = input_dim * pac
        dim = self.pacdim
        layers = []
        for h in hidden:
            layers += [nn.Linear(dim, h), nn.LeakyReLU(0.2), nn.Dropout(0.5)]
            dim = h
        layers.append(nn.Linear(dim, 1))
        self.seq = nn.Sequential(*layers)

    def forward(self, x):
        if x.shape[0] % self.pac:
            raise ValueError(f"batch of {x.shape[0]} rows is not divisible by pac={self.pac}")
        return self.seq(x.reshape(-1, self.pacdim))


def gradient_penalty(critic: Callable, real: torch.Tensor, fake: torch.Tensor, pac: int,
                     gp_lambda: float = 10.0, alpha: torch.Tensor | None = None) -> torch.Tensor:
    """``gp_lambda * mean((||grad critic(interp)|| - 1)^2)`` over packed groups.

    One interpolation weight per pac group; gradient norms are taken over
    the whole packed input.
    """
    n, dim = real.shape
    if alpha is None:
        alpha = torch.rand(n // pac, 1, 1, device=real.device, dtype=real.dtype)
    alpha = alpha.reshape(-1, 1, 1).expand(n // pac, pac, dim).reshape(n, dim)
    interp = (alpha * real + (1 - alpha) * fake).requires_grad_(True)
    out = critic(interp)
    grad = torch.autograd.grad(out, interp, grad_outputs=torch.ones_like(out), create_graph=True)[0]
    norms = grad.reshape(-1, pac * dim).norm(2, dim=1)
    return gp_lambda * ((norms - 1.0) ** 2).mean()


def _gumbel_heads(logits: torch.Tensor, spans, tau: float) -> torch.Tensor:
    return torch.cat([F.gumbel_softmax(logits[:, s:e], tau=tau, hard=False) for s, e in spans], dim=1)


def _condition_loss(logits: torch.Tensor, spans, attrs: torch.Tensor, cats: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of each row's conditioned head against its target category."""
    loss = torch.zeros(logits.shape[0], dtype=logits.dtype)
    for j, (s, e) in enumerate(spans):
        mask = attrs == j
        if mask.any():
            loss[mask] = F.cross_entropy(logits[mask, s:e], cats[mask], reduction="none")
    return loss.mean()


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    batch_size: int = 500
    z_dim: int = 128
    hidden: int = 256
    tau: float = 0.2
    pac: int = 10
    gp_lambda: float = 10.0
    g_lr: float = 2e-4
    d_lr: float = 2e-4
    g_betas: tuple[float, float] = (0.5, 0.9)
    d_betas: tuple[float, float] = (0.5, 0.9)
    weight_decay: float = 1e-6
    critic_steps: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "g_betas", tuple(self.g_betas))
        object.__setattr__(self, "d_betas", tuple(self.d_betas))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.batch_size % self.pac:
            raise ValueError(f"batch_size {self.batch_size} must be a positive multiple of pac={self.pac}")


_DIVERGENCE_LIMIT = 1e6


@dataclass(eq=False)
class TrainedGenerator:
    schema: Schema
    config: TrainConfig
    category_counts: list[list[int]]
    state: dict[str, np.ndarray] = field(repr=False)
    loss_trace: list[tuple[float, float]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._net = None
        self._sampler = None

    @property
    def fingerprint(self) -> str:
        return self.schema.fingerprint()

    @property
    def encoding(self) -> Encoding:
        return Encoding(self.schema)

    def network(self) -> GeneratorNet:
        if self._net is None:
            enc = self.encoding
            net = GeneratorNet(self.config.z_dim, enc.width, (self.config.hidden,) * 2, enc.width)
            net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.state.items()}, strict=False)
            net.eval()
            self._net = net
        return self._net

    def sampler(self) -> ConditionSampler:
        if self._sampler is None:
            self._sampler = ConditionSampler(self.schema, self.category_counts)
        return self._sampler

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        names = sorted(self.state)
        tensors, offset = [], 0
        for name in names:
            arr = self.state[name]
            tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += int(arr.size)
        cfg = asdict(self.config)
        header = {
            "schema": self.schema.to_dict(),
            "fingerprint": self.fingerprint,
            "config": cfg,
            "category_counts": self.category_counts,
            "loss_trace": [list(t) for t in self.loss_trace],
            "tensors": tensors,
        }
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        blob = b"".join(np.ascontiguousarray(self.state[n], dtype="<f4").tobytes() for n in names)
        return CHECKPOINT_MAGIC + bytes([CHECKPOINT_VERSION]) + struct.pack("<I", len(hb)) + hb + blob

    @classmethod
    def load(cls, path, schema: Schema | None = None) -> "TrainedGenerator":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), schema)

    @classmethod
    def from_bytes(cls, data: bytes, schema: Schema | None = None) -> "TrainedGenerator":
        if data[:8] != CHECKPOINT_MAGIC:
            raise DataError("not a generator checkpoint")
        if data[8] != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {data[8]}")
        (hlen,) = struct.unpack("<I", data[9:13])
        header = json.loads(data[13:13 + hlen].decode("utf-8"))
        blob = data[13 + hlen:]
        stored = Schema.from_dict(header["schema"])
        if stored.fingerprint() != header["fingerprint"]:
            raise DataError("checkpoint schema fingerprint is corrupt")
        if schema is not None and schema.fingerprint() != header["fingerprint"]:
            raise DataError("checkpoint was trained on a different schema")
        state = {}
        for t in header["tensors"]:
            count = int(np.prod(t["shape"])) if t["shape"] else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=4 * t["offset"])
            state[t["name"]] = arr.astype(np.float32).reshape(t["shape"])
        return cls(stored, TrainConfig(**header["config"]), header["category_counts"], state,
                   [tuple(x) for x in header["loss_trace"]])

    def write_loss_csv(self, dest) -> None:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "g_loss", "d_loss"])
        for i, (g, d) in enumerate(self.loss_trace, start=1):
            w.writerow([i, repr(g), repr(d)])
        if isinstance(dest, str) or hasattr(dest, "__fspath__"):
            with open(dest, "w", encoding="utf-8", newline="") as fh:
                fh.write(buf.getvalue())
        else:
            dest.write(buf.getvalue())


def _check_loss(value: float, what: str, epoch: int, step: int) -> None:
    if not math.isfinite(value) or abs(value) > _DIVERGENCE_LIMIT:
        raise TrainingDivergence(f"{what} loss diverged ({value!r}) at epoch {epoch}, step {step}")


def train(micro_sample: Population, config: TrainConfig = TrainConfig(), progress: Callable | None = None) -> TrainedGenerator:
    """Fit generator and critic on ``micro_sample``; deterministic for a fixed seed."""
    if len(micro_sample) == 0:
        raise DataError("cannot train on an empty population")
    sampler = ConditionSampler.from_population(micro_sample)
    enc = sampler.encoding
    spans = enc.spans
    data = torch.from_numpy(enc.encode(micro_sample.codes))
    rng = np.random.default_rng(config.seed)
    B = config.batch_size
    steps = max(1, len(micro_sample) // B)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        G = GeneratorNet(config.z_dim, enc.width, (config.hidden,) * 2, enc.width)
        D = CriticNet(2 * enc.width, (config.hidden,) * 2, config.pac)
        opt_g = torch.optim.Adam(G.parameters(), lr=config.g_lr, betas=config.g_betas, weight_decay=config.weight_decay)
        opt_d = torch.optim.Adam(D.parameters(), lr=config.d_lr, betas=config.d_betas, weight_decay=config.weight_decay)
        trace = []
        for epoch in range(config.epochs):
            g_sum = d_sum = 0.0
            for step in range(steps):
                for _ in range(config.critic_steps):
                    attrs, cats = sampler.sample(rng, B)
                    cond = torch.from_numpy(sampler.cond_matrix(attrs, cats))
                    real = data[torch.from_numpy(sampler.sample_rows(rng, attrs, cats))]
                    z = torch.randn(B, config.z_dim)
                    fake = _gumbel_heads(G(torch.cat([z, cond], dim=1)), spans, config.tau)
                    real_in = torch.cat([real, cond], dim=1)
                    fake_in = torch.cat([fake, cond], dim=1).detach()
                    loss_d = -(D(real_in).mean() - D(fake_in).mean())
                    pen = gradient_penalty(D, real_in, fake_in, config.pac, config.gp_lambda)
                    opt_d.zero_grad(set_to_none=False)
                    (loss_d + pen).backward()
                    opt_d.step()
                attrs, cats = sampler.sample(rng, B)
                cond = torch.from_numpy(sampler.cond_matrix(attrs, cats))
                z = torch.randn(B, config.z_dim)
                logits = G(torch.cat([z, cond], dim=1))
                fake = _gumbel_heads(logits, spans, config.tau)
                ce = _condition_loss(logits, spans, torch.from_numpy(attrs), torch.from_numpy(cats))
                loss_g = -D(torch.cat([fake, cond], dim=1)).mean() + ce
                opt_g.zero_grad(set_to_none=False)
                loss_g.backward()
                opt_g.step()
                lg, ld = float(loss_g.detach()), float((loss_d + pen).detach())
                _check_loss(lg, "generator", epoch, step)
                _check_loss(ld, "critic", epoch, step)
                g_sum += lg
                d_sum += ld
            trace.append((g_sum / steps, d_sum / steps))
            if progress is not None:
                progress(epoch, *trace[-1])
            logger.debug("epoch %d g_loss %.4f d_loss %.4f", epoch + 1, *trace[-1])

    state = {k: v.detach().numpy().astype(np.float32).copy()
             for k, v in G.state_dict().items() if v.dtype.is_floating_point}
    counts = [c.tolist() for c in sampler.counts]
    return TrainedGenerator(micro_sample.schema, config, counts, state, trace)


# ---------------------------------------------------------------------------
# generation

def _generate_batch(model: TrainedGenerator, n: int, rng: np.random.Generator, gen: torch.Generator,
                    condition: tuple[int, int] | None) -> np.ndarray:
    enc = model.encoding
    sampler = model.sampler()
    if condition is None:
        attrs, cats = sampler.sample(rng, n, log_weighted=False)
    else:
        attrs = np.full(n, condition[0], dtype=np.int64)
        cats = np.full(n, condition[1], dtype=np.int64)
    cond = torch.from_numpy(sampler.cond_matrix(attrs, cats))
    z = torch.randn(n, model.config.z_dim, generator=gen)
    with torch.no_grad():
        logits = model.network()(torch.cat([z, cond], dim=1))
        # argmax of gumbel-perturbed logits: one hard category per head
        u = torch.rand(logits.shape, generator=gen).clamp_(1e-20, 1.0 - 1e-7)
        noisy = logits - torch.log(-torch.log(u))
    return enc.decode(noisy.numpy())


class RowSource:
    """Seeded stream of generated rows, optionally filtered.

    Keeps its RNG state between calls so several quotas can draw from one
    reproducible stream.
    """

    def __init__(self, model: TrainedGenerator, seed: int = 0, chunk: int | None = None):
        self.model = model
        self.rng = np.random.default_rng(seed)
        self.gen = torch.Generator().manual_seed(int(np.random.SeedSequence(seed).generate_state(1)[0]))
        self.chunk = chunk or max(model.config.batch_size, 1)

    def draw(self, n: int, condition: tuple[int, int] | None = None,
             accept: Callable[[np.ndarray], np.ndarray] | None = None,
             max_attempts: int | None = None) -> tuple[np.ndarray, int]:
        """Rows (codes) satisfying ``condition`` and ``accept``; returns (codes, attempts)."""
        width = len(self.model.schema.attributes)
        if n == 0:
            return np.zeros((0, width), dtype=np.int64), 0
        budget = max_attempts if max_attempts is not None else 1000 * n
        got, have, attempts = [], 0, 0
        while have < n:
            if attempts >= budget:
                raise BudgetExhausted(
                    f"produced {have} of {n} rows after {attempts} attempts", have, n, attempts)
            size = min(self.chunk, budget - attempts)
            codes = _generate_batch(self.model, size, self.rng, self.gen, condition)
            attempts += size
            ok = np.ones(size, dtype=bool)
            if condition is not None:
                ok &= codes[:, condition[0]] == condition[1]
            if accept is not None:
                ok &= accept(codes)
            codes = codes[ok]
            got.append(codes)
            have += len(codes)
        return np.concatenate(got)[:n], attempts


def generate(model: TrainedGenerator, n: int, condition: tuple[str, str] | None = None, seed: int = 0,
             max_attempts: int | None = None, schema: Schema | None = None) -> Population:
    """Sample ``n`` rows; with ``condition=(attr, category)`` every row satisfies it.

    Conditional generation fixes the conditional vector and discards rows
    whose attribute disagrees, up to ``max_attempts`` generated rows
    (default ``1000 * n``).
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    if schema is not None and schema.fingerprint() != model.fingerprint:
        raise DataError("model was trained on a different schema")
    cond = None
    if condition is not None:
        attr, cat = condition
        j = model.schema.index(attr)
        cond = (j, model.schema[attr].code(cat))
    codes, _ = RowSource(model, seed).draw(n, cond, max_attempts=max_attempts)
    return Population(model.schema, codes, Provenance.SYNTHETIC)
