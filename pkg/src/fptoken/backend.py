"""Verification backend: per-device fingerprint models and authentication.

Enrollment fits one predictor per (device, feature) from observed
(args, fingerprint) pairs and calibrates a verifier on held-out
observations.  Authentication maps a request to its task list, predicts
every entry of the presented token, and accepts when enough entries verify.
The backend never learns which token entries were poisoned; poisoned
entries simply fail verification and waste the attacker's budget.

Analog features verify by relative error against a floor (tiny predictions
are compared at the floor scale, so near-zero fingerprints do not blow the
ratio up).  The SRAM feature verifies exactly: a majority-vote word table
with a Hamming-distance budget.

A learned verifier (randomized-tree classifier over prediction/observation
features) exists as an alternative to the thresholds; it needs impostor
negatives at calibration time.
"""

from __future__ import annotations

import enum
import pickle
from dataclasses import dataclass, field

import numpy as np

from .mapping import Feature, HardwareTask, MappingConfig, Request, TaskSpec, map_message
from .hwsim import Analog, Bits32, FingerprintValue, TrainingPair
from .client import AuthConfig, Token
from .regress import NearestNeighborRegressor, RandomizedTreeEnsemble

_MASK32 = 0xFFFFFFFF


class UnknownDevice(KeyError):
    """No enrollment record for the claimed device id."""


class AlreadyEnrolled(ValueError):
    """Device id already holds a sealed enrollment record."""


class IncompleteCoverage(ValueError):
    """Exact-table training pairs do not cover the full address space."""


class UnseenAddress(KeyError):
    """Exact-table lookup for an address absent from the table."""


class NoNegatives(ValueError):
    """Verifier calibration requires impostor observations but got none."""


class DegenerateInput(ValueError):
    """Least-squares input admits no unique line."""


class SnapshotFormatError(ValueError):
    """Snapshot bytes do not carry the expected header/version."""


class PredictorKind(enum.Enum):
    NEAREST_NEIGHBOR = "nearest-neighbor"
    RANDOMIZED_TREES = "randomized-trees"


class VerifierKind(enum.Enum):
    RELATIVE_ERROR = "relative-error"
    LEARNED = "learned"


class Decision(enum.Enum):
    ACCEPT = "accept"
    BELOW_THRESHOLD = "below-threshold"
    REPLAY_DETECTED = "replay-detected"
    MALFORMED_TOKEN = "malformed-token"
    UNKNOWN_DEVICE = "unknown-device"


@dataclass(frozen=True)
class BackendConfig:
    """Model and calibration knobs, shared by every enrollment."""

    predictor: PredictorKind = PredictorKind.NEAREST_NEIGHBOR
    verifier: VerifierKind = VerifierKind.RELATIVE_ERROR
    knn_k: int = 5
    n_trees: int = 50
    min_samples_leaf: int = 4
    target_tpr: float = 0.97
    hamming_threshold: int = 2
    rel_floor_mult: float = 10.0
    negative_bank_cap: int = 4000
    seed: int = 0


def fit_linear_least_squares(x, y) -> tuple[float, float]:
    """Ordinary least squares fit y ~ slope * x + intercept, closed form."""

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or len(x) != len(y):
        raise DegenerateInput("x and y must be equal-length vectors")
    if len(x) < 2:
        raise DegenerateInput("need at least two points")
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    if sxx == 0.0:
        raise DegenerateInput("all x identical; slope undefined")
    slope = float(((x - xm) * (y - ym)).sum()) / sxx
    return slope, ym - slope * xm


class AnalogPredictor:
    """Regressor over radix-normalized argument vectors."""

    def __init__(self, spec: TaskSpec, config: BackendConfig):
        self.spec = spec
        self._radices = np.array(spec.arg_radices, dtype=np.float64)
        if config.predictor is PredictorKind.NEAREST_NEIGHBOR:
            self._model = NearestNeighborRegressor(k=config.knn_k)
        else:
            self._model = RandomizedTreeEnsemble(
                n_trees=config.n_trees,
                min_samples_leaf=config.min_samples_leaf,
                seed=config.seed,
            )

    def _norm(self, args_rows: np.ndarray) -> np.ndarray:
        return np.atleast_2d(np.asarray(args_rows, dtype=np.float64)) / self._radices

    def fit(self, pairs: list[TrainingPair]) -> "AnalogPredictor":
        x = self._norm([p.args for p in pairs])
        y = np.array([p.fingerprint.value for p in pairs])
        self._model.fit(x, y)
        return self

    def predict_batch(self, args_rows) -> np.ndarray:
        return self._model.predict(self._norm(args_rows))

    def predict(self, args: tuple[int, ...]) -> float:
        return float(self.predict_batch([args])[0])


class ExactTable:
    """Per-address majority-vote word table for the SRAM feature."""

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        self._words: dict[int, int] = {}

    def fit(self, pairs: list[TrainingPair]) -> "ExactTable":
        space = self.spec.arg_radices[0]
        ones: dict[int, np.ndarray] = {}
        counts: dict[int, int] = {}
        for p in pairs:
            addr = p.args[0]
            bits = (p.fingerprint.word >> np.arange(32)) & 1
            if addr in ones:
                ones[addr] += bits
                counts[addr] += 1
            else:
                ones[addr] = bits.astype(np.int64)
                counts[addr] = 1
        if len(ones) < space:
            raise IncompleteCoverage(
                f"saw {len(ones)} of {space} addresses during enrollment"
            )
        for addr, bit_ones in ones.items():
            # strict majority per bit; ties resolve to 0
            majority = bit_ones * 2 > counts[addr]
            self._words[addr] = int((majority << np.arange(32)).sum())
        return self

    def predict(self, args: tuple[int, ...]) -> int:
        addr = args[0]
        if addr not in self._words:
            raise UnseenAddress(f"address {addr} not enrolled")
        return self._words[addr]


@dataclass(frozen=True)
class RelativeErrorVerifier:
    tau: float
    floor: float

    def verify(self, predicted: float, observed: float) -> bool:
        err = abs(observed - predicted) / max(abs(predicted), self.floor)
        return err <= self.tau


@dataclass(frozen=True)
class HammingVerifier:
    threshold: int

    def verify(self, predicted: int, observed: int) -> bool:
        return bin((predicted ^ observed) & _MASK32).count("1") <= self.threshold


@dataclass(frozen=True)
class LearnedVerifier:
    classifier: RandomizedTreeEnsemble
    floor: float

    def verify(self, predicted: float, observed: float) -> bool:
        row = _verifier_features(
            np.array([predicted]), np.array([observed]), self.floor
        )
        return bool(self.classifier.predict(row)[0] >= 0.5)


def _verifier_features(pred: np.ndarray, obs: np.ndarray, floor: float) -> np.ndarray:
    err = np.abs(obs - pred)
    rel = err / np.maximum(np.abs(pred), floor)
    return np.column_stack([pred, obs, err, rel])


@dataclass(frozen=True)
class CalibrationStats:
    """What calibration saw; fpr_train is None without negatives."""

    n_positives: int
    n_negatives: int
    tpr_train: float
    fpr_train: float | None
    threshold: float


def _split_observations(predictor, positives: list[TrainingPair]):
    pred = predictor.predict_batch([p.args for p in positives])
    obs = np.array([p.fingerprint.value for p in positives])
    return pred, obs


def calibrate_verifier(
    predictor,
    positives: list[TrainingPair],
    negatives: list[TrainingPair],
    config: BackendConfig,
    *,
    allow_positives_only: bool = False,
):
    """Fit a verifier on held-out positives and (optionally) negatives.

    Returns (verifier, CalibrationStats).  Negatives are other devices'
    observations of the same feature.  Without negatives the relative-error
    and Hamming verifiers still calibrate from positives alone when
    allow_positives_only is set (their thresholds are positive-quantile
    driven); the learned verifier always needs both classes.
    """

    if not positives:
        raise ValueError("calibration requires positive observations")
    if not negatives and not allow_positives_only:
        raise NoNegatives("no impostor observations available")

    if isinstance(predictor, ExactTable):
        return _calibrate_hamming(predictor, positives, negatives, config)
    if config.verifier is VerifierKind.RELATIVE_ERROR:
        return _calibrate_relative(predictor, positives, negatives, config)
    return _calibrate_learned(predictor, positives, negatives, config)


def _smallest_threshold(values: np.ndarray, target: float) -> float:
    # smallest candidate threshold passing at least `target` of the values
    srt = np.sort(values)
    k = min(max(int(np.ceil(target * len(srt))), 1), len(srt))
    return float(srt[k - 1])


def _calibrate_relative(predictor, positives, negatives, config):
    pred, obs = _split_observations(predictor, positives)
    floor = config.rel_floor_mult * float(np.std(obs - pred))
    if floor == 0.0:
        floor = 1e-12
    rel = np.abs(obs - pred) / np.maximum(np.abs(pred), floor)
    tau = _smallest_threshold(rel, config.target_tpr)
    verifier = RelativeErrorVerifier(tau=tau, floor=floor)
    tpr = float((rel <= tau).mean())
    fpr = None
    if negatives:
        npred, nobs = _split_observations(predictor, negatives)
        nrel = np.abs(nobs - npred) / np.maximum(np.abs(npred), floor)
        fpr = float((nrel <= tau).mean())
    stats = CalibrationStats(len(positives), len(negatives), tpr, fpr, tau)
    return verifier, stats


def _calibrate_hamming(table: ExactTable, positives, negatives, config):
    def distances(pairs):
        out = np.empty(len(pairs), dtype=np.int64)
        for i, p in enumerate(pairs):
            out[i] = bin((table.predict(p.args) ^ p.fingerprint.word) & _MASK32).count("1")
        return out

    pos_d = distances(positives)
    # smallest t in 0..8 reaching the target pass rate on positives
    threshold = 8
    for t in range(0, 9):
        if float((pos_d <= t).mean()) >= config.target_tpr:
            threshold = t
            break
    fpr = None
    if negatives:
        neg_d = distances(negatives)
        fpr = float((neg_d <= threshold).mean())
    verifier = HammingVerifier(threshold=threshold)
    tpr = float((pos_d <= threshold).mean())
    stats = CalibrationStats(len(positives), len(negatives), tpr, fpr, float(threshold))
    return verifier, stats


def _calibrate_learned(predictor, positives, negatives, config):
    if not negatives:
        raise NoNegatives("learned verifier needs impostor observations")
    ppred, pobs = _split_observations(predictor, positives)
    npred, nobs = _split_observations(predictor, negatives)
    floor = config.rel_floor_mult * float(np.std(pobs - ppred))
    if floor == 0.0:
        floor = 1e-12
    x = np.vstack([
        _verifier_features(ppred, pobs, floor),
        _verifier_features(npred, nobs, floor),
    ])
    y = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    clf = RandomizedTreeEnsemble(
        n_trees=config.n_trees,
        min_samples_leaf=config.min_samples_leaf,
        seed=config.seed,
        classifier=True,
    ).fit(x, y)
    verifier = LearnedVerifier(classifier=clf, floor=floor)
    scores = clf.predict(x) >= 0.5
    tpr = float(scores[: len(positives)].mean())
    fpr = float(scores[len(positives):].mean())
    stats = CalibrationStats(len(positives), len(negatives), tpr, fpr, 0.5)
    return verifier, stats


@dataclass
class FeatureRecord:
    spec: TaskSpec
    predictor: object
    verifier: object
    stats: CalibrationStats


@dataclass
class DeviceRecord:
    device_id: int
    features: dict[Feature, FeatureRecord]
    last_nonce: int = -1


@dataclass
class BackendState:
    """Everything the verification service persists across requests."""

    mapping_config: MappingConfig
    auth_config: AuthConfig
    config: BackendConfig
    devices: dict[int, DeviceRecord] = field(default_factory=dict)
    negative_bank: dict[Feature, list[TrainingPair]] = field(default_factory=dict)


def new_backend(
    mapping_config: MappingConfig,
    auth_config: AuthConfig | None = None,
    config: BackendConfig | None = None,
) -> BackendState:
    return BackendState(
        mapping_config=mapping_config,
        auth_config=auth_config or AuthConfig(),
        config=config or BackendConfig(),
    )


def train_predictor(spec: TaskSpec, pairs: list[TrainingPair], config: BackendConfig):
    """Fit the configured predictor for one feature from enrollment pairs."""

    if spec.feature is Feature.SRAM:
        return ExactTable(spec).fit(pairs)
    return AnalogPredictor(spec, config).fit(pairs)


def enroll_device(
    state: BackendState, device_id: int, pairs_by_feature: dict[Feature, list[TrainingPair]]
) -> DeviceRecord:
    """Fit and calibrate one device's records; seals the device id.

    Analog pairs split into interleaved train/calibration halves.  SRAM
    builds the majority table from every pair (full address coverage is
    mandatory) and calibrates on the repeat passes beyond the first sweep.
    Impostor negatives come from previously enrolled devices' calibration
    halves; the first enrollment of a feature calibrates from positives
    alone.
    """

    if device_id in state.devices:
        raise AlreadyEnrolled(f"device {device_id} is already enrolled")
    specs = {s.feature: s for s in state.mapping_config.enabled_specs}
    records: dict[Feature, FeatureRecord] = {}
    for feature, pairs in pairs_by_feature.items():
        if feature not in specs:
            raise ValueError(f"feature {feature.value} is not enabled")
        spec = specs[feature]
        if feature is Feature.SRAM:
            # the majority table wants every observation; calibration wants
            # readouts not guaranteed to coincide with the table, i.e. the
            # repeat passes after the first full sweep of the address space
            train = pairs
            calib = pairs[spec.arg_radices[0]:] or pairs
        else:
            train, calib = pairs[0::2], pairs[1::2]
        if not train or not calib:
            raise ValueError(f"not enough pairs to enroll {feature.value}")
        predictor = train_predictor(spec, train, state.config)
        negatives = state.negative_bank.get(feature, [])
        verifier, stats = calibrate_verifier(
            predictor, calib, negatives, state.config,
            allow_positives_only=not negatives,
        )
        records[feature] = FeatureRecord(spec, predictor, verifier, stats)
        bank = state.negative_bank.setdefault(feature, [])
        room = state.config.negative_bank_cap - len(bank)
        if room > 0:
            bank.extend(calib[:room])
    record = DeviceRecord(device_id=device_id, features=records)
    state.devices[device_id] = record
    return record


class TagMismatch(ValueError):
    """Token entry's value kind contradicts the mapped task's feature."""


def predict_fingerprint(state: BackendState, device_id: int, task: HardwareTask) -> FingerprintValue:
    record = state.devices.get(device_id)
    if record is None:
        raise UnknownDevice(str(device_id))
    feat = record.features.get(task.feature)
    if feat is None:
        raise UnknownDevice(f"device {device_id} has no {task.feature.value} record")
    if task.feature is Feature.SRAM:
        return Bits32(feat.predictor.predict(task.args))
    return Analog(feat.predictor.predict(task.args))


def verify_one(
    state: BackendState, device_id: int, task: HardwareTask, value: FingerprintValue
) -> bool:
    """Predict one task for one device and check the observation against it."""

    record = state.devices.get(device_id)
    if record is None:
        raise UnknownDevice(str(device_id))
    feat = record.features.get(task.feature)
    if feat is None:
        return False
    if task.feature is Feature.SRAM:
        if not isinstance(value, Bits32):
            raise TagMismatch("SRAM task answered with an analog value")
        return feat.verifier.verify(feat.predictor.predict(task.args), value.word)
    if not isinstance(value, Analog):
        raise TagMismatch("analog task answered with a word value")
    return feat.verifier.verify(feat.predictor.predict(task.args), value.value)


@dataclass(frozen=True)
class AuthResult:
    decision: Decision
    matched: int
    required: int
    entry_results: tuple[bool, ...] = ()

    @property
    def accepted(self) -> bool:
        return self.decision is Decision.ACCEPT


def authenticate(
    state: BackendState, device_id: int, request: Request, token: Token
) -> AuthResult:
    """Full admission decision for one request/token presentation.

    Order matters: identity, token shape, replay, then hardware checks.
    The nonce floor only advances on acceptance, so failed or replayed
    presentations cannot burn nonces the legitimate client still needs.
    """

    cfg = state.auth_config
    record = state.devices.get(device_id)
    if record is None:
        return AuthResult(Decision.UNKNOWN_DEVICE, 0, cfg.accept_num)

    if token.nonce != request.nonce:
        return AuthResult(Decision.MALFORMED_TOKEN, 0, cfg.accept_num)
    if len(token.entries) != cfg.total_num:
        return AuthResult(Decision.MALFORMED_TOKEN, 0, cfg.accept_num)
    if any(e.task_index != i for i, e in enumerate(token.entries)):
        return AuthResult(Decision.MALFORMED_TOKEN, 0, cfg.accept_num)

    if request.nonce <= record.last_nonce:
        return AuthResult(Decision.REPLAY_DETECTED, 0, cfg.accept_num)

    tasks = map_message(request, state.mapping_config)
    results = []
    for entry, task in zip(token.entries, tasks):
        try:
            results.append(verify_one(state, device_id, task, entry.value))
        except (TagMismatch, UnseenAddress):
            results.append(False)
    matched = sum(results)
    if matched >= cfg.accept_num:
        record.last_nonce = request.nonce
        return AuthResult(Decision.ACCEPT, matched, cfg.accept_num, tuple(results))
    return AuthResult(Decision.BELOW_THRESHOLD, matched, cfg.accept_num, tuple(results))


# ---- snapshots ----

_SNAPSHOT_MAGIC = b"FPTB1\n"


def save_backend(state: BackendState, path: str) -> None:
    """Serialize the backend to a versioned snapshot file.

    Snapshots embed fitted models via pickle: load only files this process
    (or an operator you trust) wrote.  The magic header is a format check,
    not an integrity or authenticity seal.
    """

    with open(path, "wb") as fh:
        fh.write(_SNAPSHOT_MAGIC)
        pickle.dump(state, fh, protocol=pickle.HIGHEST_PROTOCOL)


def load_backend(path: str) -> BackendState:
    with open(path, "rb") as fh:
        magic = fh.read(len(_SNAPSHOT_MAGIC))
        if magic != _SNAPSHOT_MAGIC:
            raise SnapshotFormatError("not a backend snapshot (bad magic)")
        state = pickle.load(fh)
    if not isinstance(state, BackendState):
        raise SnapshotFormatError("snapshot does not contain a backend state")
    return state
