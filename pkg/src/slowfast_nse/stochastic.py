"""Q-Wiener increments with reproducible, independent counter-based streams.

Every stream is identified by ``(root_seed, sample, role, replica)``.  The
Philox key is derived hierarchically through ``numpy.random.SeedSequence``
(root -> sample -> role -> replica) and draw ``c`` of a stream always reads
the Philox block starting at counter ``(0, c, 0, 0)``.  Any increment can
therefore be regenerated from its stream id and draw index alone, which is
what makes checkpoint/resume bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spectral import SpectralField, SpectralSpace

__all__ = [
    "ROLES",
    "CovarianceSpec",
    "NoiseStream",
    "sample_increment",
    "sample_increments",
    "trace",
    "trace_h",
]

ROLES = {"slow": 0, "fast": 1, "frozen": 2, "init": 3, "probe": 4}

_U53 = 1.0 / 9007199254740992.0


class NoiseStream:
    """A counter-addressed stream of standard normals.

    Parameters
    ----------
    root_seed : int
        64-bit experiment seed.
    sample : int
        Monte Carlo path index.
    role : str
        One of ``slow``, ``fast``, ``frozen`` (driving noises) or ``init``,
        ``probe`` (random initial data and diagnostic fields).
    counter : int
        Index of the next draw.
    replica : int
        Extra level for independent copies sharing a sample and role.
    """

    __slots__ = ("root_seed", "sample", "role", "replica", "counter", "_key", "_bitgen")

    def __init__(self, root_seed: int, sample: int, role: str, counter: int = 0, replica: int = 0):
        if role not in ROLES:
            raise ValueError(f"unknown stream role {role!r}")
        self.root_seed = int(root_seed)
        self.sample = int(sample)
        self.role = role
        self.replica = int(replica)
        self.counter = int(counter)
        ss = np.random.SeedSequence(self.root_seed, spawn_key=(self.sample, ROLES[role], self.replica))
        self._key = ss.generate_state(2, np.uint64)
        self._bitgen = np.random.Philox(key=self._key)

    @property
    def stream_id(self) -> tuple[int, str, int]:
        return (self.sample, self.role, self.replica)

    def __repr__(self) -> str:
        return (
            f"NoiseStream(root_seed={self.root_seed}, sample={self.sample}, "
            f"role={self.role!r}, replica={self.replica}, counter={self.counter})"
        )

    def __reduce__(self):
        return (NoiseStream, (self.root_seed, self.sample, self.role, self.counter, self.replica))

    def copy(self) -> "NoiseStream":
        return NoiseStream(self.root_seed, self.sample, self.role, self.counter, self.replica)

    def _seek(self, draw: int) -> None:
        self._bitgen.state = {
            "bit_generator": "Philox",
            "state": {"counter": np.array([0, draw, 0, 0], dtype=np.uint64), "key": self._key},
            "buffer": np.zeros(4, dtype=np.uint64),
            "buffer_pos": 4,
            "has_uint32": 0,
            "uinteger": 0,
        }

    def raw(self, n_words: int) -> np.ndarray:
        """Raw 64-bit words of the current draw; advances the counter."""
        self._seek(self.counter)
        self.counter += 1
        return self._bitgen.random_raw(n_words)

    def normals(self, n: int) -> np.ndarray:
        """Return ``n`` standard normals for the current draw and advance."""
        return _box_muller(self.raw(2 * ((n + 1) // 2)), n)

    def generator(self) -> np.random.Generator:
        """A numpy Generator for the current draw (advances the counter)."""
        draw = self.counter
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=self._key, counter=[0, draw, 0, 0]))


def _box_muller(w: np.ndarray, n: int) -> np.ndarray:
    # w has shape (..., 2h); the first h words give radii, the rest angles
    half = w.shape[-1] // 2
    u1 = ((w[..., :half] >> np.uint64(11)).astype(float) + 1.0) * _U53
    u2 = (w[..., half:] >> np.uint64(11)).astype(float) * _U53
    r = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    return np.concatenate([r * np.cos(ang), r * np.sin(ang)], axis=-1)[..., :n]


def batch_normals(streams, n: int) -> np.ndarray:
    """``normals(n)`` for each stream, stacked; identical to the per-stream call."""
    words = 2 * ((n + 1) // 2)
    if not streams:
        return np.empty((0, n))
    w = np.stack([s.raw(words) for s in streams])
    return _box_muller(w, n)


def stream_family(root_seed: int, role: str, samples, counter: int = 0, replica: int = 0) -> list[NoiseStream]:
    return [NoiseStream(root_seed, s, role, counter, replica) for s in samples]


@dataclass(frozen=True)
class CovarianceSpec:
    """Diagonal trace-class covariance ``q_k = amplitude * |k|^(-2 alpha)``.

    ``q_k`` is the variance per real degree of freedom of mode ``k``.  The
    operator acts on both velocity components of the zero-mean space and
    commutes with the Leray projector.  ``support`` optionally restricts the
    noise to a boolean subset of modes.
    """

    space: SpectralSpace
    alpha: float = 1.5
    amplitude: float = 1.0
    support: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.alpha > 1.0:
            raise ValueError(f"decay exponent must exceed 1, got {self.alpha}")
        if self.amplitude < 0:
            raise ValueError(f"amplitude must be nonnegative, got {self.amplitude}")

    @property
    def eigenvalues(self) -> np.ndarray:
        sp = self.space
        q = np.zeros_like(sp.eigenvalues)
        keep = sp.retained if self.support is None else (sp.retained & np.asarray(self.support, bool))
        q[keep] = self.amplitude * sp.eigenvalues[keep] ** (-self.alpha)
        return q


def trace(cov: CovarianceSpec) -> float:
    """Trace over retained modes and both components (zero-mean L2 space)."""
    return float(2.0 * cov.eigenvalues.sum())


def trace_h(cov: CovarianceSpec) -> float:
    """Trace of the covariance restricted to divergence-free fields."""
    return float(cov.eigenvalues.sum())


def _increment_from_normals(cov: CovarianceSpec, dt: float, z: np.ndarray) -> np.ndarray:
    sp = cov.space
    lead = z.shape[:-1]
    z = z.reshape(lead + (4, sp.n_pairs))
    pi, pj = sp.pair_index
    ni, nj = sp.pair_neg_index
    scale = np.sqrt(cov.eigenvalues[pi, pj] * dt / 2.0)
    v = (z[..., 0:2, :] + 1j * z[..., 2:4, :]) * scale
    # project on the representative modes, then mirror to -k
    p11, p12, p22 = sp._p11[pi, pj], sp._p12[pi, pj], sp._p22[pi, pj]
    vals = np.stack([p11 * v[..., 0, :] + p12 * v[..., 1, :], p12 * v[..., 0, :] + p22 * v[..., 1, :]], axis=-2)
    c = np.zeros(lead + sp.shape, dtype=complex)
    c[..., pi, pj] = vals
    c[..., ni, nj] = np.conj(vals)
    return c


def sample_increments(cov: CovarianceSpec, dt: float, streams) -> np.ndarray:
    """Batched increments, one per stream: shape ``(len(streams), 2, N, N)``."""
    if not dt > 0:
        raise ValueError(f"increment time step must be positive, got {dt}")
    n = 4 * cov.space.n_pairs
    z = batch_normals(streams, n)
    return _increment_from_normals(cov, dt, z)


def sample_increment(cov: CovarianceSpec, dt: float, stream: NoiseStream) -> SpectralField:
    """One increment ``W(t+dt) - W(t)``, Hermitian and divergence-free."""
    return SpectralField._wrap(cov.space, sample_increments(cov, dt, [stream])[0])
