"""Desk-scale evaluation harness: metric sweeps and CSV artifacts.

Every experiment seeds its own fleet, enrolls it through the service
loopback (the same frames a remote enrollment would send), runs a sweep,
and emits one CSV row per sweep point.  Output is a pure function of the
experiment spec: same spec, byte-identical CSV.

Plotting is out of scope; the CSV schema is the contract.
"""

from __future__ import annotations

import io
import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .mapping import (
    Feature,
    HardwareTask,
    MappingConfig,
    MappingVariant,
    Request,
    TaskSpec,
)
from .hwsim import (
    DeviceProfile,
    Model,
    collect_pairs,
    evaluation_task_specs,
    execute_task,
    spawn_fleet,
)
from .client import AuthConfig, Token, TokenClient, TokenEntry, poison_value
from .backend import BackendConfig, new_backend
from .attacks import run_tamper_attack
from . import service as svc

SCHEMA_VERSION = 1
CSV_COLUMNS = ("axis_value", "tpr", "fpr", "attack_rate", "seed", "trials")

EXPERIMENT_NAMES = (
    "features",
    "sweep-usednum",
    "sweep-acceptnum",
    "noise-curve",
    "tamper-curve",
)


class DegenerateSample(ValueError):
    """A rate was requested over an empty class of outcomes."""


class UnknownExperiment(ValueError):
    """Experiment name outside EXPERIMENT_NAMES."""


def compute_tpr_fpr(outcomes: list[tuple[bool, bool]]) -> tuple[float, float]:
    """Acceptance rates split by ground truth; needs both classes present."""

    legit = [accepted for is_legit, accepted in outcomes if is_legit]
    impostor = [accepted for is_legit, accepted in outcomes if not is_legit]
    if not legit:
        raise DegenerateSample("no legitimate outcomes in sample")
    if not impostor:
        raise DegenerateSample("no impostor outcomes in sample")
    return sum(legit) / len(legit), sum(impostor) / len(impostor)


@dataclass(frozen=True)
class ExperimentSpec:
    """One reproducible experiment run.

    trials is per sweep point and per outcome class; the floor keeps rate
    estimates meaningful.
    """

    name: str
    model: Model = Model.MODEL_A
    device_count: int = 10
    fleet_seed: int = 20
    auth: AuthConfig = field(default_factory=AuthConfig)
    mapping: MappingConfig | None = None
    trials: int = 500
    enroll_pairs: int = 1000
    seed: int = 0
    out_path: str | None = None

    def __post_init__(self) -> None:
        if self.name not in EXPERIMENT_NAMES:
            raise UnknownExperiment(f"no experiment named {self.name!r}")
        if self.trials < 100:
            raise ValueError("trials must be >= 100 for stable rate estimates")
        if self.device_count < 2:
            raise ValueError("sweeps need at least two devices for impostor trials")

    def resolved_mapping(self) -> MappingConfig:
        if self.mapping is not None:
            return self.mapping
        return MappingConfig(
            enabled_specs=evaluation_task_specs(), total_num=self.auth.total_num
        )


# ---- arena construction ----


def enroll_fleet_loopback(
    service: svc.BackendService,
    fleet: list[DeviceProfile],
    enroll_pairs: int,
    rng: np.random.Generator,
) -> None:
    """Enroll every profile through the wire-frame handler, not direct calls."""

    specs = service.state.mapping_config.enabled_specs
    for device_id, profile in enumerate(fleet):
        reply = service.handle_message(svc.Kind.ENROLL_BEGIN, svc.enroll_begin_body(device_id))
        _check_ack(reply)
        for spec in specs:
            if spec.feature is Feature.SRAM:
                n = 3 * spec.arg_radices[0]
            else:
                n = enroll_pairs
            pairs = collect_pairs(profile, spec, n, rng)
            for start in range(0, len(pairs), 400):
                body = svc.enroll_data_body(device_id, spec.feature, pairs[start:start + 400])
                _check_ack(service.handle_message(svc.Kind.ENROLL_DATA, body))
        _check_ack(
            service.handle_message(svc.Kind.ENROLL_COMMIT, svc.enroll_commit_body(device_id))
        )


def _check_ack(reply: tuple[int, bytes]) -> None:
    kind, body = reply
    if kind == svc.Kind.ERROR:
        code, message = svc.parse_error(body)
        raise RuntimeError(f"enrollment failed: {code.name}: {message}")


def build_arena(
    spec: ExperimentSpec,
) -> tuple[svc.BackendService, list[DeviceProfile], np.random.Generator]:
    """Seeded fleet + loopback-enrolled service + a generator for trials."""

    fleet = spawn_fleet(spec.model, spec.device_count, seed=spec.fleet_seed)
    state = new_backend(spec.resolved_mapping(), spec.auth, BackendConfig(seed=spec.seed))
    enroll_rng, trial_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2)
    ]
    service = svc.BackendService(state)
    enroll_fleet_loopback(service, fleet, spec.enroll_pairs, enroll_rng)
    return service, fleet, trial_rng


# ---- sweep points ----


def _auth_point(
    service: svc.BackendService,
    fleet: list[DeviceProfile],
    trials: int,
    rng: np.random.Generator,
    nonces: itertools.count,
) -> tuple[float, float]:
    """TPR over legit presentations, FPR over cross-device impostors."""

    state = service.state
    auth_cfg = state.auth_config
    mapping_cfg = state.mapping_config
    clients = [TokenClient(p, auth_cfg, mapping_cfg, rng) for p in fleet]
    outcomes: list[tuple[bool, bool]] = []
    for t in range(trials):
        victim = t % len(fleet)
        request = Request("measure", next(nonces), (b"\x01",))
        token = clients[victim].generate_token(request)
        result = svc.parse_auth_reply(
            service.handle_message(
                svc.Kind.AUTH_REQUEST, svc.auth_request_body(victim, request, token)
            )[1]
        )
        outcomes.append((True, result.accepted))

        impostor = (victim + 1 + int(rng.integers(len(fleet) - 1))) % len(fleet)
        request = Request("measure", next(nonces), (b"\x01",))
        token = clients[impostor].generate_token(request)
        result = svc.parse_auth_reply(
            service.handle_message(
                svc.Kind.AUTH_REQUEST, svc.auth_request_body(victim, request, token)
            )[1]
        )
        outcomes.append((False, result.accepted))
    return compute_tpr_fpr(outcomes)


def _row(axis_value, tpr, fpr, attack_rate, seed: int, trials: int) -> dict:
    return {
        "axis_value": axis_value,
        "tpr": tpr,
        "fpr": fpr,
        "attack_rate": attack_rate,
        "seed": seed,
        "trials": trials,
    }


def _exp_features(spec: ExperimentSpec) -> list[dict]:
    """Per-feature discriminability: single observations, no token layer."""

    from .backend import verify_one

    service, fleet, rng = build_arena(spec)
    state = service.state
    rows = []
    for task_spec in state.mapping_config.enabled_specs:
        outcomes = []
        for t in range(spec.trials):
            victim = t % len(fleet)
            args = tuple(int(rng.integers(r)) for r in task_spec.arg_radices)
            task = HardwareTask(task_spec.feature, args)
            own = execute_task(fleet[victim], task, rng)
            outcomes.append((True, verify_one(state, victim, task, own)))
            impostor = (victim + 1 + int(rng.integers(len(fleet) - 1))) % len(fleet)
            other = execute_task(fleet[impostor], task, rng)
            outcomes.append((False, verify_one(state, victim, task, other)))
        tpr, fpr = compute_tpr_fpr(outcomes)
        rows.append(_row(task_spec.feature.value, tpr, fpr, None, spec.seed, spec.trials))
    return rows


def _exp_sweep_usednum(spec: ExperimentSpec) -> list[dict]:
    service, fleet, rng = build_arena(spec)
    nonces = itertools.count(1)
    base = spec.auth
    rows = []
    for used in range(1, base.total_num + 1):
        service.state.auth_config = replace(
            base, used_num=used, accept_num=math.ceil(used / 2)
        )
        tpr, fpr = _auth_point(service, fleet, spec.trials, rng, nonces)
        rows.append(_row(used, tpr, fpr, None, spec.seed, spec.trials))
    return rows


def _exp_sweep_acceptnum(spec: ExperimentSpec) -> list[dict]:
    service, fleet, rng = build_arena(spec)
    nonces = itertools.count(1)
    base = replace(spec.auth, used_num=5, accept_num=1)
    rows = []
    for accept in range(1, 6):
        service.state.auth_config = replace(base, accept_num=accept)
        tpr, fpr = _auth_point(service, fleet, spec.trials, rng, nonces)
        rows.append(_row(accept, tpr, fpr, None, spec.seed, spec.trials))
    return rows


NOISE_AXIS = (0.0, 0.02, 0.04, 0.06, 0.08, 0.12, 0.16, 0.20)


def scaled_token(
    profile: DeviceProfile,
    request: Request,
    noise: float,
    mapping_cfg: MappingConfig,
    rng: np.random.Generator,
) -> Token:
    """Honest measurements with every entry scaled by (1 + noise), no offset.

    noise = 0 is a fully honest token, so its acceptance rate IS the
    legitimate TPR of the same presentation procedure.
    """

    from .mapping import map_message

    tasks = map_message(request, mapping_cfg)
    entries = []
    for index, task in enumerate(tasks):
        value = execute_task(profile, task, rng)
        entries.append(TokenEntry(index, poison_value(value, noise, 0.0)))
    return Token(nonce=request.nonce, entries=tuple(entries))


def _exp_noise_curve(spec: ExperimentSpec) -> list[dict]:
    service, fleet, rng = build_arena(spec)
    nonces = itertools.count(1)
    mapping_cfg = service.state.mapping_config
    rows = []
    for noise in NOISE_AXIS:
        accepted = 0
        for t in range(spec.trials):
            victim = t % len(fleet)
            request = Request("measure", next(nonces), (b"\x01",))
            token = scaled_token(fleet[victim], request, noise, mapping_cfg, rng)
            result = svc.parse_auth_reply(
                service.handle_message(
                    svc.Kind.AUTH_REQUEST, svc.auth_request_body(victim, request, token)
                )[1]
            )
            accepted += result.accepted
        rows.append(_row(noise, accepted / spec.trials, None, None, spec.seed, spec.trials))
    return rows


TAMPER_BUDGETS = (1, 2, 5, 10, 20, 50)
TAMPER_SPEC = TaskSpec(Feature.RTC_PHA, (5, 4, 5))


def _exp_tamper_curve(spec: ExperimentSpec) -> list[dict]:
    """Success rate of random request tampering vs attempt budget at small d."""

    mapping_cfg = MappingConfig(
        enabled_specs=(TAMPER_SPEC,), total_num=2, variant=MappingVariant.FULL
    )
    request = Request("UNLOCK", 77, (b"\xaa", b"\xbb"))
    rng = np.random.default_rng(spec.seed)
    rows = []
    for budget in TAMPER_BUDGETS:
        wins = 0
        for _ in range(spec.trials):
            wins += run_tamper_attack(request, mapping_cfg, budget, rng).succeeded
        rows.append(_row(budget, None, None, wins / spec.trials, spec.seed, spec.trials))
    return rows


_EXPERIMENTS = {
    "features": _exp_features,
    "sweep-usednum": _exp_sweep_usednum,
    "sweep-acceptnum": _exp_sweep_acceptnum,
    "noise-curve": _exp_noise_curve,
    "tamper-curve": _exp_tamper_curve,
}


# ---- CSV assembly ----


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def rows_to_csv(name: str, rows: list[dict]) -> str:
    out = io.StringIO()
    out.write(f"# fptoken-experiments schema={SCHEMA_VERSION} experiment={name}\n")
    out.write(",".join(CSV_COLUMNS) + "\n")
    for row in rows:
        out.write(",".join(_format_cell(row[c]) for c in CSV_COLUMNS) + "\n")
    return out.getvalue()


def run_experiment(spec: ExperimentSpec) -> str:
    """Run one experiment; returns the CSV text and writes it when asked."""

    rows = _EXPERIMENTS[spec.name](spec)
    csv_text = rows_to_csv(spec.name, rows)
    if spec.out_path is not None:
        with open(spec.out_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(csv_text)
    return csv_text
