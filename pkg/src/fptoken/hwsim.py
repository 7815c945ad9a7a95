"""Simulated MCU fleet: device profiles and hardware-fingerprint execution.

Each device carries small per-feature manufacturing deviations drawn at
spawn time; executing a task returns the deterministic device response plus
fresh measurement noise.  Three model families exist with grossly different
nominal response tables, so cross-model fingerprints never resemble each
other, while same-model devices differ only through their deviation
parameters.

Deviation model.  The dominant parameter of every analog feature is drawn
from a coarse lattice of manufacturing corners plus a small Gaussian jitter,
not from a single Gaussian.  Two same-model devices then land on different
corners with probability (K-1)/K and their noise-free responses separate by
at least one corner step, which is what keeps fingerprints identifiable at
the default inter/intra spread ratio.  Measurement noise scales with the
response magnitude (plus a small floor) so relative verification error looks
uniform across the argument space.

Argument surfaces are deliberately smooth: coarse arguments (radix <= 4)
may switch response scale by a few percent, fine arguments only modulate it
by well under the device separation.  Anything else would make fingerprints
unlearnable from a realistic enrollment budget.

Concurrency: profiles are immutable after spawn; execute_task touches only
the caller's RNG, so parallel simulation across devices is safe.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .mapping import Feature, TaskSpec, HardwareTask

_MASK32 = 0xFFFFFFFF
_MASK64 = 0xFFFFFFFFFFFFFFFF

DEFAULT_SEPARATION = 5.0


class UnknownFeature(ValueError):
    """Task targets a feature the device does not expose."""


class DomainError(ValueError):
    """Argument outside the simulated hardware's admissible range."""


class Model(enum.Enum):
    """Device model family. Nominal tables differ grossly across models."""

    MODEL_A = "model_a"
    MODEL_B = "model_b"
    MODEL_C = "model_c"


@dataclass(frozen=True)
class Analog:
    """Continuous fingerprint value (voltages, durations, phases)."""

    value: float


@dataclass(frozen=True)
class Bits32:
    """32-bit word fingerprint (SRAM power-up state)."""

    word: int

    def __post_init__(self) -> None:
        if not 0 <= self.word <= _MASK32:
            raise ValueError("word must fit in 32 bits")


FingerprintValue = Analog | Bits32


@dataclass(frozen=True)
class TrainingPair:
    """One enrollment observation: the task arguments and the measured value."""

    feature: Feature
    args: tuple[int, ...]
    fingerprint: FingerprintValue


@dataclass(frozen=True)
class DacAdcBlock:
    gain_dev: float
    poly: tuple[float, float, float]


@dataclass(frozen=True)
class FpuBlock:
    perf_dev: float


@dataclass(frozen=True)
class PwmBlock:
    duty_err: float
    volt_err: float


@dataclass(frozen=True)
class RtcFreBlock:
    skew: float


@dataclass(frozen=True)
class RtcPhaBlock:
    phase_off: float


@dataclass(frozen=True)
class SramBlock:
    flip_prob: float


@dataclass(frozen=True)
class DeviceProfile:
    """Immutable per-device parameter set; everything a device 'is'."""

    device_id: int
    model: Model
    secret_seed: int
    features: tuple[Feature, ...]
    dac_adc: DacAdcBlock
    fpu: FpuBlock
    pwm: PwmBlock
    rtc_fre: RtcFreBlock
    rtc_pha: RtcPhaBlock
    sram: SramBlock


@dataclass(frozen=True)
class _ModelTable:
    """Nominal (device-independent) response tables for one model family."""

    adc_bits: int
    fpu_base: float
    fpu_noise_mult: float
    pwm_volt: float
    rtc_period: float
    pha_clk_step: float


_MODELS: dict[Model, _ModelTable] = {
    # Loose analogues of three real MCU families. MODEL_A and MODEL_B lack a
    # hardware FPU, so their float workloads run in software with far noisier
    # timing; that is what fpu_noise_mult encodes.
    Model.MODEL_A: _ModelTable(
        adc_bits=12, fpu_base=1.00, fpu_noise_mult=6.0,
        pwm_volt=3.30, rtc_period=1.000, pha_clk_step=0.210,
    ),
    Model.MODEL_B: _ModelTable(
        adc_bits=10, fpu_base=2.60, fpu_noise_mult=6.0,
        pwm_volt=5.00, rtc_period=0.490, pha_clk_step=0.370,
    ),
    Model.MODEL_C: _ModelTable(
        adc_bits=11, fpu_base=0.37, fpu_noise_mult=1.0,
        pwm_volt=2.76, rtc_period=2.130, pha_clk_step=0.110,
    ),
}

ALL_FEATURES: tuple[Feature, ...] = (
    Feature.DAC_ADC, Feature.FPU, Feature.PWM,
    Feature.RTC_FRE, Feature.RTC_PHA, Feature.SRAM,
)

# Default task argument radices. Products: 4096 + 2048 + 4096 + 4096 + 4096
# + 1024 = 19456 distinct tasks across the six features.
_DEFAULT_RADICES: dict[Feature, tuple[int, ...]] = {
    Feature.DAC_ADC: (256, 2, 2, 4),
    Feature.FPU: (2, 32, 32),
    Feature.PWM: (4, 16, 16, 2, 2),
    Feature.RTC_FRE: (4, 8, 16, 8),
    Feature.RTC_PHA: (4, 16, 64),
    Feature.SRAM: (1024,),
}

SRAM_ADDRESS_COUNT = 1024

# Relative measurement-noise scale per feature (intra-device).
_NOISE_REL: dict[Feature, float] = {
    Feature.DAC_ADC: 0.001,
    Feature.FPU: 0.002,
    Feature.PWM: 0.002,
    Feature.RTC_FRE: 2.0e-4,
    Feature.RTC_PHA: 0.010,  # absolute, in fractional cycles
}

# Corner-lattice geometry for the dominant deviation parameter, expressed at
# the default separation ratio; spawn scales steps linearly with the ratio.
# A nonzero gap excludes near-zero corners: every device then carries a
# deviation large enough that relative verification is signal-dominated.
_LATTICE_K = 16
_CORNER_STEP: dict[Feature, float] = {
    Feature.DAC_ADC: 0.030,
    Feature.FPU: 0.050,
    Feature.PWM: 0.040,
    Feature.RTC_FRE: 0.005,
}
_CORNER_GAP: dict[Feature, float] = {
    Feature.DAC_ADC: 0.100,
    Feature.FPU: 0.0,
    Feature.PWM: 0.0,
    Feature.RTC_FRE: 0.0,
}
_CORNER_JITTER: dict[Feature, float] = {
    Feature.DAC_ADC: 0.0020,
    Feature.FPU: 0.0040,
    Feature.PWM: 0.0100,   # spawned as the separate volt_err parameter
    Feature.RTC_FRE: 5.0e-4,
}


def default_task_specs() -> tuple[TaskSpec, ...]:
    """All six feature specs with the calibrated default radices."""

    return tuple(TaskSpec(f, _DEFAULT_RADICES[f]) for f in ALL_FEATURES)


def evaluation_task_specs() -> tuple[TaskSpec, ...]:
    """The four-feature ensemble used by the authentication experiments.

    Fpu is excluded (soft-float models verify too loosely) and RtcPha is
    excluded (wrapped phases verify poorly); see the per-feature quality
    notes in the tests.
    """

    keep = (Feature.DAC_ADC, Feature.PWM, Feature.RTC_FRE, Feature.SRAM)
    return tuple(TaskSpec(f, _DEFAULT_RADICES[f]) for f in keep)


def ideal_dac_adc(v_dac: float, res_dac: int, res_adc: int) -> float:
    """Noise-free DAC->ADC reading for input code v_dac.

    Maps a res_dac-bit input code onto the res_adc-bit output scale:
    v_dac * (2**res_adc - 1) / (2**res_dac - 1).
    """

    if res_dac < 1 or res_adc < 1:
        raise DomainError("converter resolutions must be >= 1 bit")
    if not 0.0 <= v_dac <= float(2 ** res_dac - 1):
        raise DomainError("v_dac outside the DAC input range")
    return v_dac * float(2 ** res_adc - 1) / float(2 ** res_dac - 1)


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def sram_word(secret_seed: int, address: int) -> int:
    """Stable 32-bit power-up word for one 4-byte-aligned SRAM address.

    Derived lazily from the device's secret seed, so fleets serialize
    without storing tables and equal seeds give bit-identical memories.
    """

    return _splitmix64((secret_seed ^ (address * 0x9E3779B97F4A7C15)) & _MASK64) & _MASK32


def _corner(rng: np.random.Generator, feature: Feature, scale: float) -> float:
    step = _CORNER_STEP[feature] * scale
    jitter = _CORNER_JITTER[feature] * scale
    gap = _CORNER_GAP[feature] * scale
    if gap > 0.0:
        mag = gap + step * int(rng.integers(_LATTICE_K // 2))
        sign = 1.0 if int(rng.integers(2)) else -1.0
        return sign * mag + float(rng.normal(0.0, jitter))
    level = int(rng.integers(_LATTICE_K))
    return (level - (_LATTICE_K - 1) / 2.0) * step + float(rng.normal(0.0, jitter))


def spawn_fleet(
    model: Model,
    count: int,
    seed: int,
    *,
    first_id: int = 0,
    separation: float = DEFAULT_SEPARATION,
) -> list[DeviceProfile]:
    """Create `count` same-model devices with independent deviations.

    `separation` scales every per-device parameter spread relative to the
    measurement noise; the default keeps parameter spread comfortably above
    five times the noise scale, which is what makes same-model devices
    tell apart.  Same (model, count, seed) reproduces the fleet exactly.
    """

    if count < 1:
        raise ValueError("count must be >= 1")
    scale = separation / DEFAULT_SEPARATION
    profiles: list[DeviceProfile] = []
    children = np.random.SeedSequence(seed).spawn(count)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        poly = tuple(
            float(rng.normal(0.0, s * scale)) for s in (0.004, 0.003, 0.002)
        )
        profiles.append(DeviceProfile(
            device_id=first_id + i,
            model=model,
            secret_seed=int(rng.integers(1 << 63)),
            features=ALL_FEATURES,
            dac_adc=DacAdcBlock(
                gain_dev=_corner(rng, Feature.DAC_ADC, scale),
                poly=poly,  # type: ignore[arg-type]
            ),
            fpu=FpuBlock(perf_dev=_corner(rng, Feature.FPU, scale)),
            pwm=PwmBlock(
                duty_err=_corner(rng, Feature.PWM, scale),
                volt_err=float(rng.normal(0.0, _CORNER_JITTER[Feature.PWM] * scale)),
            ),
            rtc_fre=RtcFreBlock(skew=_corner(rng, Feature.RTC_FRE, scale)),
            rtc_pha=RtcPhaBlock(phase_off=float(rng.random())),
            sram=SramBlock(flip_prob=0.01),
        ))
    return profiles


def _check_args(task: HardwareTask) -> None:
    radices = _DEFAULT_RADICES[task.feature]
    if len(task.args) != len(radices):
        raise DomainError(
            f"{task.feature.value} takes {len(radices)} arguments, got {len(task.args)}"
        )
    for a, r in zip(task.args, radices):
        if not 0 <= a < r:
            raise DomainError(f"argument {a} outside radix {r}")


def _wave(t: float, phase: float) -> float:
    return math.sin(2.0 * math.pi * (phase + t))


def expected_response(profile: DeviceProfile, task: HardwareTask) -> float | int:
    """Noise-free response: the deterministic device part of execute_task.

    Ground truth for predictor tests and for the fingerprint-identifiability
    checks; real hardware has no such oracle.
    """

    if task.feature not in profile.features:
        raise UnknownFeature(f"device lacks {task.feature.value}")
    _check_args(task)
    table = _MODELS[profile.model]
    a = task.args

    if task.feature is Feature.DAC_ADC:
        # Input codes below ~40% of full scale are not exercised: the low
        # end of a real DAC/ADC chain is dominated by offset garbage.
        v = 96.0 + a[0] * (159.0 / 255.0)
        # readback-to-stimulus ratio: a gain estimate, nearly flat in the
        # input code, so the fingerprint is the chain's gain deviation and
        # the code only contributes quantization ripple and the poly shape
        ratio = ideal_dac_adc(v, 8, table.adc_bits) / v
        combo = (
            (1.0, 0.997)[a[1]]
            * (1.0, 1.0025)[a[2]]
            * (1.0, 0.9985, 1.002, 0.997)[a[3]]
        )
        x = a[0] / 255.0
        c1, c2, c3 = profile.dac_adc.poly
        shape = 1.0 + c1 * x + c2 * x * x + c3 * x ** 3
        return ratio * profile.dac_adc.gain_dev * combo * shape

    if task.feature is Feature.FPU:
        use_fpu, xb, yb = a
        workload = table.fpu_base * (1.0 + 3.2 * (1 - use_fpu)) * (
            1.0
            + 0.05 * _wave(0.9 * xb / 32.0, 0.15)
            + 0.05 * _wave(0.7 * yb / 32.0, 0.40)
        )
        return workload * (1.0 + profile.fpu.perf_dev)

    if task.feature is Feature.PWM:
        clk, freq, window, drain, duty = a
        duty_frac = (0.48, 0.52)[duty]
        base = (
            8.0 * duty_frac * table.pwm_volt
            * (1.0, 0.985, 1.03, 0.96)[clk]
            * (1.0 + 0.015 * _wave(0.8 * freq / 16.0, 0.20))
            * (1.0, 0.991)[drain]
            * (1.0 + 0.004 * _wave(0.9 * window / 16.0, 0.60))
        )
        return base * (1.0 + profile.pwm.duty_err + profile.pwm.volt_err)

    if task.feature is Feature.RTC_FRE:
        clk, div, adj, window = a
        # div/adj act as digital calibration trim (ppm-scale), not dividers.
        trim = 60e-6 * (div - 3.5) + 15e-6 * (adj - 7.5)
        base = (
            table.rtc_period * (1.0, 0.9985, 1.0032, 0.996)[clk] * 32.0
            * (1.0 + trim)
            * (1.0 + 25e-6 * _wave(0.85 * window / 8.0, 0.30))
        )
        return base * (1.0 + profile.rtc_fre.skew)

    if task.feature is Feature.RTC_PHA:
        clk, div, period = a
        drift = (
            table.pha_clk_step * clk
            + 0.13 * div / 16.0
            + 0.41 * period / 64.0
        )
        return (profile.rtc_pha.phase_off + drift) % 1.0

    if task.feature is Feature.SRAM:
        return sram_word(profile.secret_seed, a[0])

    raise UnknownFeature(str(task.feature))


def _noise_sigma(profile: DeviceProfile, task: HardwareTask, base: float) -> float:
    table = _MODELS[profile.model]
    f = task.feature
    if f is Feature.DAC_ADC:
        return _NOISE_REL[f] * (abs(base) + 0.5)
    if f is Feature.FPU:
        return _NOISE_REL[f] * table.fpu_noise_mult * (abs(base) + 0.2 * table.fpu_base)
    if f is Feature.PWM:
        return _NOISE_REL[f] * (abs(base) + 0.5)
    if f is Feature.RTC_FRE:
        return _NOISE_REL[f] * (abs(base) + 1.6 * table.rtc_period)
    if f is Feature.RTC_PHA:
        return _NOISE_REL[f]
    raise UnknownFeature(str(f))


def noise_scale(model: Model, feature: Feature) -> float:
    """Representative (near worst-case) noise sigma for one analog feature.

    Used by verifier calibration to place the relative-error floor.
    """

    table = _MODELS[model]
    if feature is Feature.DAC_ADC:
        worst = float(2 ** table.adc_bits - 1) / 255.0 * 0.33
        return _NOISE_REL[feature] * (worst + 0.5)
    if feature is Feature.FPU:
        worst = table.fpu_base * 4.2 * 1.5
        return _NOISE_REL[feature] * table.fpu_noise_mult * (worst + 0.2 * table.fpu_base)
    if feature is Feature.PWM:
        worst = 8.0 * 0.52 * table.pwm_volt * 1.03 * 1.4
        return _NOISE_REL[feature] * (worst + 0.5)
    if feature is Feature.RTC_FRE:
        worst = table.rtc_period * 1.045 * 32.0 * 1.4
        return _NOISE_REL[feature] * (worst + 1.6 * table.rtc_period)
    if feature is Feature.RTC_PHA:
        return _NOISE_REL[feature]
    raise UnknownFeature(str(feature))


def execute_task(
    profile: DeviceProfile, task: HardwareTask, rng: np.random.Generator
) -> FingerprintValue:
    """Run one measurement task on the device; fresh noise per call."""

    base = expected_response(profile, task)
    if task.feature is Feature.SRAM:
        word = int(base)
        p = profile.sram.flip_prob
        if p > 0.0:
            flips = rng.random(32) < p
            if flips.any():
                mask = int(np.packbits(flips[::-1]).view(">u4")[0])
                word ^= mask
        return Bits32(word)
    sigma = _noise_sigma(profile, task, float(base))
    value = float(base) + float(rng.normal(0.0, sigma))
    if task.feature is Feature.RTC_PHA:
        value %= 1.0
    return Analog(value)


def collect_pairs(
    profile: DeviceProfile, spec: TaskSpec, n: int, rng: np.random.Generator
) -> list[TrainingPair]:
    """Gather n enrollment pairs for one feature.

    Analog features sample arguments uniformly.  Sram enumerates the full
    address space first (exact coverage) before repeating, so n equal to the
    address count observes every word exactly once.
    """

    if n < 1:
        raise ValueError("n must be >= 1")
    pairs: list[TrainingPair] = []
    if spec.feature is Feature.SRAM:
        space = spec.arg_radices[0]
        for i in range(n):
            task = HardwareTask(spec.feature, (i % space,))
            pairs.append(TrainingPair(spec.feature, task.args, execute_task(profile, task, rng)))
        return pairs
    for _ in range(n):
        args = tuple(int(rng.integers(r)) for r in spec.arg_radices)
        task = HardwareTask(spec.feature, args)
        pairs.append(TrainingPair(spec.feature, args, execute_task(profile, task, rng)))
    return pairs


# ---- fleet serialization ----

FLEET_VERSION = 1


def save_fleet(profiles: list[DeviceProfile], path: str, *, spawns: list[dict] | None = None) -> None:
    """Write fleet.json: spawn parameters plus every derived device parameter."""

    devices = []
    for p in profiles:
        d = asdict(p)
        d["model"] = p.model.value
        d["features"] = [f.value for f in p.features]
        devices.append(d)
    doc = {"version": FLEET_VERSION, "spawns": spawns or [], "devices": devices}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def load_fleet(path: str) -> list[DeviceProfile]:
    """Read fleet.json back into profiles, bit-exact."""

    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != FLEET_VERSION:
        raise ValueError(f"unsupported fleet version: {doc.get('version')!r}")
    profiles = []
    for d in doc["devices"]:
        profiles.append(DeviceProfile(
            device_id=int(d["device_id"]),
            model=Model(d["model"]),
            secret_seed=int(d["secret_seed"]),
            features=tuple(Feature(f) for f in d["features"]),
            dac_adc=DacAdcBlock(d["dac_adc"]["gain_dev"], tuple(d["dac_adc"]["poly"])),
            fpu=FpuBlock(d["fpu"]["perf_dev"]),
            pwm=PwmBlock(d["pwm"]["duty_err"], d["pwm"]["volt_err"]),
            rtc_fre=RtcFreBlock(d["rtc_fre"]["skew"]),
            rtc_pha=RtcPhaBlock(d["rtc_pha"]["phase_off"]),
            sram=SramBlock(d["sram"]["flip_prob"]),
        ))
    return profiles
