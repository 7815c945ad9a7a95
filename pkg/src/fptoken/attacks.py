"""Executable adversaries: replay, tampering, mimicry, poison spotting.

Every attack here runs against the real backend decision path, so reported
success rates are end-to-end admission rates, not proxy scores.  Attackers
use fresh nonces throughout; the replay guard is measured separately and is
not the binding constraint in the mimicry numbers.

The eavesdropping model is worst-case: the attacker observes (task,
fingerprint) pairs directly, since the mapping algorithm is public.  What it
cannot see is which entries were poisoned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mapping import (
    Feature,
    HardwareTask,
    MappingConfig,
    MappingVariant,
    Request,
    map_message,
)
from .hwsim import Analog, Bits32, DeviceProfile, FingerprintValue, TrainingPair, expected_response
from .client import AuthConfig, Token, TokenClient, TokenEntry, choose_poison_mask, generate_token_with_mask
from .backend import AnalogPredictor, BackendConfig, BackendState, Decision, authenticate

_MASK32 = 0xFFFFFFFF


class UnknownVictim(KeyError):
    """Mimic target is not enrolled at the backend."""


# ---- tampering ----


def closed_form_tamper_prob(d: int, n: int) -> float:
    """Probability that n random tries hit a fixed point of a d*d space.

    Stable for large n: 1 - ((d^2 - 1)/d^2)^n via expm1/log1p.
    """

    if d < 1:
        raise ValueError("output space size must be positive")
    if n < 0:
        raise ValueError("attempt count must be non-negative")
    if n == 0:
        return 0.0
    if d == 1:
        return 1.0
    return -math.expm1(n * math.log1p(-1.0 / (d * d)))


@dataclass(frozen=True)
class TamperOutcome:
    succeeded: bool
    attempts_used: int
    variant: MappingVariant


def _mutate_request(request: Request, rng: np.random.Generator) -> Request:
    # redraw a non-empty subset of the mutable slots (operation + payloads)
    slots = 1 + len(request.payloads)
    subset = 0
    while subset == 0:
        subset = int(rng.integers(1, 1 << slots))
    operation = request.operation
    if subset & 1:
        operation = rng.bytes(4).hex()
    payloads = list(request.payloads)
    for k in range(len(payloads)):
        if subset & (1 << (k + 1)):
            payloads[k] = rng.bytes(4)
    return Request(operation=operation, nonce=request.nonce, payloads=tuple(payloads))


def run_tamper_attack(
    request: Request, config: MappingConfig, budget: int, rng: np.random.Generator
) -> TamperOutcome:
    """Search for a modified request that maps to the original task list.

    Each attempt redraws a random non-empty subset of the request's mutable
    parts with fresh random content.  Succeeding means the backend would
    execute a different operation while every fingerprint check still lines
    up.  Under the full digest any mutation rerandomizes all rounds; the
    ablated variants leave some rounds untouched, which is what the
    comparative experiments measure.
    """

    if budget < 1:
        raise ValueError("budget must be at least 1")
    target = map_message(request, config)
    for attempt in range(1, budget + 1):
        candidate = _mutate_request(request, rng)
        if map_message(candidate, config) == target:
            return TamperOutcome(True, attempt, config.variant)
    return TamperOutcome(False, budget, config.variant)


# ---- replay ----


@dataclass(frozen=True)
class ReplayReport:
    trials: int
    accepted_first: int
    replays_flagged: int
    fresh_false_flags: int

    @property
    def detection_rate(self) -> float:
        """Share of replayed accepted presentations that were flagged."""
        return self.replays_flagged / self.accepted_first if self.accepted_first else 0.0


def run_replay_attack(
    state: BackendState,
    device: DeviceProfile,
    trials: int,
    rng: np.random.Generator,
) -> ReplayReport:
    """Capture each accepted presentation and submit it a second time.

    A first presentation that fails verification burns no nonce, so its
    copy is rejected for the same reason rather than as a replay; only
    accepted presentations count toward the detection rate.
    """

    client = TokenClient(device, state.auth_config, state.mapping_config, rng)
    record = state.devices.get(device.device_id)
    if record is None:
        raise UnknownVictim(str(device.device_id))
    nonce = record.last_nonce + 1
    accepted_first = 0
    flagged = 0
    false_flags = 0
    for k in range(trials):
        request = Request(operation=rng.bytes(4).hex(), nonce=nonce + k,
                          payloads=(rng.bytes(4), rng.bytes(4)))
        token = client.generate_token(request)
        first = authenticate(state, device.device_id, request, token)
        if first.decision is Decision.REPLAY_DETECTED:
            false_flags += 1
        if not first.accepted:
            continue
        accepted_first += 1
        second = authenticate(state, device.device_id, request, token)
        if second.decision is Decision.REPLAY_DETECTED:
            flagged += 1
    return ReplayReport(trials=trials, accepted_first=accepted_first,
                        replays_flagged=flagged, fresh_false_flags=false_flags)


# ---- hardware mimic ----


def run_hw_mimic(
    attacker: DeviceProfile,
    victim_id: int,
    state: BackendState,
    trials: int,
    rng: np.random.Generator,
) -> float:
    """Honest tokens from the attacker's own hardware, claimed as victim_id."""

    record = state.devices.get(victim_id)
    if record is None:
        raise UnknownVictim(str(victim_id))
    client = TokenClient(attacker, state.auth_config, state.mapping_config, rng)
    accepted = 0
    nonce = record.last_nonce + 1
    for k in range(trials):
        request = Request(operation=rng.bytes(4).hex(), nonce=nonce + k,
                          payloads=(rng.bytes(4), rng.bytes(4)))
        token = client.generate_token(request)
        if authenticate(state, victim_id, request, token).accepted:
            accepted += 1
    return accepted / trials


# ---- software mimic ----


@dataclass(frozen=True)
class AttackStrategy:
    """One of the four eavesdropper strategies.

    filter_training: keep only a random used_num/total_num fraction of the
    eavesdropped pairs (bet that the kept ones are the raw ones).
    correct_output: when fabricating a token, invert the poisoning transform
    on each prediction with probability 1 - used_num/total_num.
    """

    filter_training: bool
    correct_output: bool


ALL_STRATEGIES = (
    AttackStrategy(False, False),
    AttackStrategy(True, False),
    AttackStrategy(False, True),
    AttackStrategy(True, True),
)


def eavesdrop_traffic(
    profile: DeviceProfile,
    auth_cfg: AuthConfig,
    mapping_cfg: MappingConfig,
    n_requests: int,
    rng: np.random.Generator,
    start_nonce: int = 1,
):
    """Record (task, fingerprint) pairs from live token traffic.

    Returns (pairs, poisoned) where poisoned[i] labels pairs[i]; labels are
    withheld from attackers and exist for scoring identification methods.
    """

    pairs: list[tuple[HardwareTask, FingerprintValue]] = []
    poisoned: list[bool] = []
    for k in range(n_requests):
        request = Request(operation=rng.bytes(4).hex(), nonce=start_nonce + k,
                          payloads=(rng.bytes(4), rng.bytes(4)))
        mask = choose_poison_mask(auth_cfg.total_num, auth_cfg.used_num, rng)
        token = generate_token_with_mask(profile, request, mask, auth_cfg, mapping_cfg, rng)
        tasks = map_message(request, mapping_cfg)
        for i, (task, entry) in enumerate(zip(tasks, token.entries)):
            pairs.append((task, entry.value))
            poisoned.append(not bool(mask[i]))
    return pairs, poisoned


class SoftwareMimic:
    """Attacker-side fingerprint model learned from eavesdropped traffic."""

    def __init__(self, auth_cfg: AuthConfig, mapping_cfg: MappingConfig):
        self.auth_cfg = auth_cfg
        self.mapping_cfg = mapping_cfg
        self.analog: dict[Feature, AnalogPredictor] = {}
        self.words: dict[tuple[Feature, tuple[int, ...]], int] = {}
        self.n_training_pairs = 0

    def predict_raw(self, task: HardwareTask) -> FingerprintValue | None:
        if task.feature in self.analog:
            return Analog(self.analog[task.feature].predict(task.args))
        key = (task.feature, task.args)
        if key in self.words:
            return Bits32(self.words[key])
        return None


def train_sw_mimic(
    eavesdropped,
    strategy: AttackStrategy,
    auth_cfg: AuthConfig,
    mapping_cfg: MappingConfig,
    backend_cfg: BackendConfig,
    rng: np.random.Generator,
) -> SoftwareMimic:
    """Fit one attacker regressor per feature from recorded traffic."""

    kept = list(eavesdropped)
    if strategy.filter_training:
        n_keep = round(len(kept) * auth_cfg.used_num / auth_cfg.total_num)
        idx = rng.choice(len(kept), size=n_keep, replace=False)
        kept = [kept[i] for i in idx]

    mimic = SoftwareMimic(auth_cfg, mapping_cfg)
    mimic.n_training_pairs = len(kept)
    specs = {s.feature: s for s in mapping_cfg.enabled_specs}
    by_feature: dict[Feature, list] = {}
    for task, value in kept:
        by_feature.setdefault(task.feature, []).append((task, value))
    for feature, items in by_feature.items():
        if feature is Feature.SRAM:
            seen: dict[tuple[int, ...], list[int]] = {}
            for task, value in items:
                seen.setdefault(task.args, []).append(value.word)
            for args, words in seen.items():
                bits = np.array([[(w >> b) & 1 for b in range(32)] for w in words])
                majority = bits.sum(axis=0) * 2 > len(words)
                mimic.words[(feature, args)] = int(
                    sum(1 << b for b in range(32) if majority[b])
                )
        else:
            pairs = [TrainingPair(feature, t.args, v) for t, v in items]
            mimic.analog[feature] = AnalogPredictor(specs[feature], backend_cfg).fit(pairs)
    return mimic


def run_sw_mimic(
    mimic: SoftwareMimic,
    strategy: AttackStrategy,
    state: BackendState,
    victim_id: int,
    trials: int,
    rng: np.random.Generator,
) -> float:
    """Fabricate tokens from the attacker model and submit them."""

    record = state.devices.get(victim_id)
    if record is None:
        raise UnknownVictim(str(victim_id))
    cfg = state.auth_config
    correct_prob = 1.0 - cfg.used_num / cfg.total_num
    accepted = 0
    nonce = record.last_nonce + 1
    for k in range(trials):
        request = Request(operation=rng.bytes(4).hex(), nonce=nonce + k,
                          payloads=(rng.bytes(4), rng.bytes(4)))
        entries = []
        for i, task in enumerate(map_message(request, state.mapping_config)):
            value = mimic.predict_raw(task)
            if value is None:
                # unseen address (or untrained feature): fabricate something
                value = Bits32(int(rng.integers(0, 1 << 32))) \
                    if task.feature is Feature.SRAM else Analog(0.0)
            if strategy.correct_output and rng.random() < correct_prob:
                u = rng.uniform(cfg.noise_lo, cfg.noise_hi)
                if isinstance(value, Analog):
                    value = Analog((value.value - cfg.c) / (1.0 + u))
                else:
                    word = int(math.floor((value.word - cfg.c) / (1.0 + u) + 0.5))
                    value = Bits32(max(word, 0) & _MASK32)
            entries.append(TokenEntry(task_index=i, value=value))
        token = Token(nonce=request.nonce, entries=tuple(entries))
        if authenticate(state, victim_id, request, token).accepted:
            accepted += 1
    return accepted / trials


# ---- poisoned-pair identification ----


class IdentifyMethod:
    SUPERVISED = "supervised"
    EXTRA_DEVICE = "extra-device"


def identify_poison(
    labeled,
    method: str,
    *,
    auth_cfg: AuthConfig,
    mapping_cfg: MappingConfig | None = None,
    backend_cfg: BackendConfig | None = None,
    oracle: DeviceProfile | None = None,
    rng: np.random.Generator,
) -> float:
    """Score an attacker's attempt to tell poisoned pairs from raw ones.

    labeled: list of (task, observed value, is_poisoned); the labels are
    used only to compute the returned accuracy.

    Supervised trains regressors on a random presumed-normal subset and
    flags pairs whose relative prediction error exceeds the poison noise
    floor.  ExtraDevice replaces the learned model with a second same-model
    device's noise-free response and flags by relative discrepancy.
    """

    if not labeled:
        raise ValueError("need labeled pairs to score")
    flags: list[bool] = []
    if method == IdentifyMethod.SUPERVISED:
        if mapping_cfg is None or backend_cfg is None:
            raise ValueError("supervised identification needs mapping and backend configs")
        pairs = [(task, value) for task, value, _ in labeled]
        strategy = AttackStrategy(filter_training=True, correct_output=False)
        mimic = train_sw_mimic(pairs, strategy, auth_cfg, mapping_cfg, backend_cfg, rng)
        for task, value, _ in labeled:
            pred = mimic.predict_raw(task)
            if pred is None:
                flags.append(False)
            elif isinstance(value, Bits32):
                flags.append(pred.word != value.word)
            else:
                scale = max(abs(pred.value), 1e-9)
                flags.append(abs(value.value - pred.value) / scale > auth_cfg.noise_lo)
    elif method == IdentifyMethod.EXTRA_DEVICE:
        if oracle is None:
            raise ValueError("extra-device identification needs an oracle profile")
        for task, value, _ in labeled:
            ref = expected_response(oracle, task)
            if isinstance(value, Bits32):
                flags.append(value.word != int(ref))
            else:
                scale = max(abs(ref), 1e-9)
                flags.append(abs(value.value - ref) / scale > auth_cfg.noise_lo / 2.0)
    else:
        raise ValueError(f"unknown identification method {method!r}")

    truth = [bool(p) for _, _, p in labeled]
    return float(np.mean([f == t for f, t in zip(flags, truth)]))
