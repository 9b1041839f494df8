"""Attention and stopping models.

Three variants share one stopping rule: a contributor keeps going only while
the attention ``x`` paid to the latest submission strictly exceeds a global
threshold ``theta``.

* ``Iid``: ``x = a * y``; every submission has the same chance to succeed,
  so lifetimes are geometric.
* ``Reinforced``: ``x = a * n * y`` for the ``n``-th submission; the stop
  probability decays like ``1/n`` and lifetimes get a power-law tail.
* ``FanLoop``: ``x = (c0 + c1 * fans) * y`` where fans are recruited from
  the base audience, which makes attention grow linearly in ``n``.

``y`` is multiplicative noise with mean one drawn from a :class:`NoiseKernel`.
"""

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import special

from .rng import STREAM_NOISE, split_seed, uniform_pair

__all__ = [
    "ConfigError",
    "NoiseFamily",
    "NoiseKernel",
    "Variant",
    "ModelParams",
    "AttentionSample",
    "sample_noise",
    "sample_noise_array",
    "attention_of",
    "stop_decision",
    "load_params",
    "dump_params",
    "parse_params",
]


class ConfigError(ValueError):
    """Invalid model configuration; ``key`` names the offending setting."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class NoiseFamily(enum.IntEnum):
    EXPONENTIAL = 0
    UNIFORM_ZERO_TWO = 1
    LOGNORMAL = 2
    CONSTANT = 3


_FAMILY_NAMES = {
    "exponential": NoiseFamily.EXPONENTIAL,
    "uniformzerotwo": NoiseFamily.UNIFORM_ZERO_TWO,
    "lognormal": NoiseFamily.LOGNORMAL,
    "constant": NoiseFamily.CONSTANT,
}
_FAMILY_LABELS = {
    NoiseFamily.EXPONENTIAL: "Exponential",
    NoiseFamily.UNIFORM_ZERO_TWO: "UniformZeroTwo",
    NoiseFamily.LOGNORMAL: "LogNormal",
    NoiseFamily.CONSTANT: "Constant",
}


@dataclass(frozen=True)
class NoiseKernel:
    """Mean-one multiplicative noise.

    Only ``LogNormal`` takes a parameter: the log-scale standard deviation
    ``sigma``. Its location is fixed at ``-sigma**2 / 2`` so the mean is one.
    """

    family: NoiseFamily = NoiseFamily.EXPONENTIAL
    params: tuple = ()

    def __post_init__(self):
        family = self.family
        if isinstance(family, str):
            try:
                family = _FAMILY_NAMES[family.replace("_", "").replace("-", "").lower()]
            except KeyError:
                raise ConfigError("noise.family", f"unknown family {self.family!r}") from None
        object.__setattr__(self, "family", NoiseFamily(family))
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.family == NoiseFamily.LOGNORMAL:
            if len(self.params) != 1:
                raise ConfigError("noise.params", "LogNormal takes exactly one parameter (sigma)")
            sigma = self.params[0]
            if not (math.isfinite(sigma) and sigma > 0):
                raise ConfigError("noise.params", f"sigma must be positive, got {sigma}")
        elif self.params:
            raise ConfigError("noise.params", f"{self.label} takes no parameters")

    @property
    def label(self):
        return _FAMILY_LABELS[self.family]

    @property
    def sigma(self):
        return self.params[0] if self.family == NoiseFamily.LOGNORMAL else 0.0

    @property
    def mu(self):
        return -0.5 * self.sigma**2

    def density_at_zero(self):
        """Density of ``y`` at 0+, which sets the predicted tail exponent."""
        return {
            NoiseFamily.EXPONENTIAL: 1.0,
            NoiseFamily.UNIFORM_ZERO_TWO: 0.5,
        }.get(self.family, 0.0)

    def log_survival(self, s):
        """``log P(y > s)``, elementwise."""
        s = np.asarray(s, dtype=float)
        fam = self.family
        if fam == NoiseFamily.EXPONENTIAL:
            return -np.maximum(s, 0.0)
        if fam == NoiseFamily.UNIFORM_ZERO_TWO:
            with np.errstate(divide="ignore"):
                return np.where(s < 2.0, np.log1p(-np.clip(s, 0.0, 2.0) / 2.0), -np.inf)
        if fam == NoiseFamily.LOGNORMAL:
            with np.errstate(divide="ignore"):
                z = (np.log(np.maximum(s, 0.0)) - self.mu) / self.sigma
            return special.log_ndtr(-z)
        return np.where(s < 1.0, 0.0, -np.inf)


class Variant(enum.IntEnum):
    IID = 0
    REINFORCED = 1
    FANLOOP = 2


_VARIANT_NAMES = {"iid": Variant.IID, "reinforced": Variant.REINFORCED, "fanloop": Variant.FANLOOP}
_VARIANT_LABELS = {Variant.IID: "Iid", Variant.REINFORCED: "Reinforced", Variant.FANLOOP: "FanLoop"}


@dataclass(frozen=True)
class ModelParams:
    variant: Variant = Variant.REINFORCED
    a: float = 1.0
    theta: float = 1.0
    noise: NoiseKernel = field(default_factory=NoiseKernel)
    c0: float = 0.0
    c1: float = 0.0
    c2: float = 0.0
    n_cap: int = 100_000
    gap_mean_seconds: float = 86_400.0

    def __post_init__(self):
        variant = self.variant
        if isinstance(variant, str):
            try:
                variant = _VARIANT_NAMES[variant.lower()]
            except KeyError:
                raise ConfigError("variant", f"unknown variant {self.variant!r}") from None
        object.__setattr__(self, "variant", Variant(variant))
        if not isinstance(self.noise, NoiseKernel):
            raise ConfigError("noise.family", "noise must be a NoiseKernel")
        for key in ("a", "theta", "gap_mean_seconds"):
            value = float(getattr(self, key))
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(key, f"must be positive, got {getattr(self, key)!r}")
            object.__setattr__(self, key, value)
        for key in ("c0", "c1"):
            value = float(getattr(self, key))
            if not (math.isfinite(value) and value >= 0):
                raise ConfigError(key, f"must be nonnegative, got {getattr(self, key)!r}")
            object.__setattr__(self, key, value)
        c2 = float(self.c2)
        if not 0.0 <= c2 <= 1.0:
            raise ConfigError("c2", f"must lie in [0, 1], got {self.c2!r}")
        object.__setattr__(self, "c2", c2)
        n_cap = self.n_cap
        if isinstance(n_cap, float) and n_cap.is_integer():
            n_cap = int(n_cap)
        if not isinstance(n_cap, (int, np.integer)) or isinstance(n_cap, bool) or n_cap < 1:
            raise ConfigError("n_cap", f"must be a positive integer, got {self.n_cap!r}")
        if n_cap >= 2**32:
            raise ConfigError("n_cap", "must be below 2**32")
        object.__setattr__(self, "n_cap", int(n_cap))

    def predicted_exponent(self):
        """Tail exponent of the lifetime distribution implied by the model.

        For ``Reinforced`` the per-step stop probability behaves like
        ``f(0) * (theta / a) / n`` with ``f`` the noise density, giving
        survival ``~ n**-(f(0) theta / a)`` and a mass function one power
        steeper. ``None`` for variants without a power-law prediction.
        """
        if self.variant != Variant.REINFORCED:
            return None
        return 1.0 + self.noise.density_at_zero() * self.theta / self.a


@dataclass(frozen=True)
class AttentionSample:
    index: int
    fans_before: int
    attention: float


# -- scalar kernels shared with the simulator --------------------------------


@njit(nogil=True, cache=True)
def noise_from_uniforms(family, mu, sigma, u1, u2):
    if family == 0:
        return -math.log(u1)
    if family == 1:
        return 2.0 * u1
    if family == 2:
        z = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        return math.exp(mu + sigma * z)
    return 1.0


@njit(nogil=True, cache=True)
def attention_kernel(variant, a, c0, c1, n, fans, y):
    if variant == 0:
        return a * y
    if variant == 1:
        return a * n * y
    return (c0 + c1 * fans) * y


def sample_noise(kernel, rng):
    """One draw of ``y``.

    ``rng`` is a :class:`attnloop.rng.CounterStream` (or anything with a
    ``pair()`` method returning two uniforms on (0, 1)); a
    ``numpy.random.Generator`` is accepted too.
    """
    if not isinstance(kernel, NoiseKernel):
        raise ConfigError("noise.family", "expected a NoiseKernel")
    if hasattr(rng, "pair"):
        u1, u2 = rng.pair()
    else:
        u1, u2 = 1.0 - rng.random(2)
    return noise_from_uniforms(int(kernel.family), kernel.mu, kernel.sigma, u1, u2)


@njit(nogil=True, cache=True)
def _noise_block(family, mu, sigma, k0, k1, user, stream, out):
    for i in range(out.size):
        u1, u2 = uniform_pair(i, stream, user, k0, k1)
        out[i] = noise_from_uniforms(family, mu, sigma, u1, u2)


def sample_noise_array(kernel, size, seed, user=0):
    """``size`` noise draws from consecutive counters of one lane."""
    out = np.empty(int(size), dtype=np.float64)
    k0, k1 = split_seed(seed)
    _noise_block(int(kernel.family), kernel.mu, kernel.sigma, k0, k1, int(user), STREAM_NOISE, out)
    return out


def attention_of(params, n, fans, y):
    if n < 1:
        raise ValueError(f"submission index must be >= 1, got {n}")
    if fans < 0:
        raise ValueError(f"fan count must be nonnegative, got {fans}")
    return attention_kernel(int(params.variant), params.a, params.c0, params.c1, n, fans, y)


def stop_decision(x, theta):
    """True when attention ``x`` fails to surpass ``theta`` (ties stop)."""
    if theta <= 0:
        raise ValueError(f"theta must be positive, got {theta}")
    return x <= theta


# -- key = value config files ------------------------------------------------

_KEYS = ("variant", "a", "theta", "noise.family", "noise.params", "c0", "c1", "c2", "n_cap", "gap_mean_seconds")


def _fmt(value):
    return format(value, ".17g") if isinstance(value, float) else str(value)


def dump_params(params):
    """Serialize to ``key = value`` lines."""
    values = {
        "variant": _VARIANT_LABELS[params.variant],
        "a": params.a,
        "theta": params.theta,
        "noise.family": params.noise.label,
        "noise.params": ",".join(_fmt(p) for p in params.noise.params),
        "c0": params.c0,
        "c1": params.c1,
        "c2": params.c2,
        "n_cap": params.n_cap,
        "gap_mean_seconds": params.gap_mean_seconds,
    }
    return "".join(f"{k} = {_fmt(values[k])}\n" for k in _KEYS)


def parse_params(text):
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(key or f"line {lineno}", "expected 'key = value'")
        if key not in _KEYS:
            raise ConfigError(key, "unknown key")
        if key in raw:
            raise ConfigError(key, "duplicate key")
        raw[key] = value.strip()

    def number(key, cast=float):
        try:
            return cast(raw[key])
        except ValueError:
            raise ConfigError(key, f"not a number: {raw[key]!r}") from None

    kwargs = {}
    for key in ("a", "theta", "c0", "c1", "c2", "gap_mean_seconds"):
        if key in raw:
            kwargs[key] = number(key)
    if "n_cap" in raw:
        n_cap = number("n_cap")
        if not n_cap.is_integer():
            raise ConfigError("n_cap", f"must be an integer, got {raw['n_cap']!r}")
        kwargs["n_cap"] = int(n_cap)
    if "variant" in raw:
        kwargs["variant"] = raw["variant"]
    noise_params = ()
    if raw.get("noise.params"):
        try:
            noise_params = tuple(float(p) for p in raw["noise.params"].split(","))
        except ValueError:
            raise ConfigError("noise.params", f"not a number list: {raw['noise.params']!r}") from None
    kwargs["noise"] = NoiseKernel(raw.get("noise.family", "Exponential"), noise_params)
    return ModelParams(**kwargs)


def load_params(path):
    with open(path, encoding="utf-8") as fh:
        return parse_params(fh.read())

