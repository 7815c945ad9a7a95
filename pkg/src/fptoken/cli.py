"""Command-line front end: fleets, enrollment, serving, attacks, sweeps.

Exit codes: 0 on success (for `auth`, an accepted presentation), 1 for a
rejected presentation, 2 for any error.  Errors print one machine-parsable
line to stderr: `error: <ExceptionName>: <message>`.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field

import numpy as np

from .mapping import MappingConfig, Request
from .hwsim import DeviceProfile, Model, load_fleet, save_fleet, spawn_fleet
from .hwsim import evaluation_task_specs
from .client import AuthConfig, TokenClient
from .backend import (
    BackendConfig,
    PredictorKind,
    VerifierKind,
    authenticate,
    load_backend,
    new_backend,
    save_backend,
)
from . import attacks
from .experiments import (
    EXPERIMENT_NAMES,
    ExperimentSpec,
    enroll_fleet_loopback,
    rows_to_csv,
    run_experiment,
)
from . import service as svc

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Config file missing, malformed, or from another schema version."""


@dataclass
class CliConfig:
    auth: AuthConfig = field(default_factory=AuthConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    enroll_pairs: int = 1000


def load_config(path: str | None) -> CliConfig:
    if path is None:
        return CliConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict) or raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config must declare version={CONFIG_VERSION}")
    known = {"version", "auth", "backend", "enroll_pairs"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    cfg = CliConfig()
    if "auth" in raw:
        cfg.auth = AuthConfig(**raw["auth"])
    if "backend" in raw:
        fields = dict(raw["backend"])
        if "predictor" in fields:
            fields["predictor"] = PredictorKind(fields["predictor"])
        if "verifier" in fields:
            fields["verifier"] = VerifierKind(fields["verifier"])
        cfg.backend = BackendConfig(**fields)
    if "enroll_pairs" in raw:
        cfg.enroll_pairs = int(raw["enroll_pairs"])
    return cfg


def _parse_model(name: str) -> Model:
    key = name.upper()
    if not key.startswith("MODEL_"):
        key = f"MODEL_{key}"
    try:
        return Model[key]
    except KeyError:
        raise ValueError(f"unknown device model {name!r}") from None


def _default_mapping(auth: AuthConfig) -> MappingConfig:
    return MappingConfig(enabled_specs=evaluation_task_specs(), total_num=auth.total_num)


def _profile_by_id(fleet: list[DeviceProfile], device_id: int) -> DeviceProfile:
    for profile in fleet:
        if profile.device_id == device_id:
            return profile
    raise KeyError(f"device {device_id} is not in the fleet file")


def _build_attack_arena(args, cfg: CliConfig):
    """Small enrolled arena shared by the attack subcommands."""

    fleet = spawn_fleet(_parse_model(args.model), args.devices, seed=args.fleet_seed)
    state = new_backend(_default_mapping(cfg.auth), cfg.auth, cfg.backend)
    service = svc.BackendService(state)
    enroll_rng, trial_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(args.seed).spawn(2)
    ]
    enroll_fleet_loopback(service, fleet, args.pairs, enroll_rng)
    return state, fleet, trial_rng


def _emit(args, name: str, rows: list[dict], lines: list[str]) -> None:
    for line in lines:
        print(line)
    if getattr(args, "out", None):
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(rows_to_csv(name, rows))
        print(f"wrote {args.out}")


# ---- subcommands ----


def cmd_fleet_spawn(args) -> int:
    cfg_spawn = {"model": args.model, "count": args.count, "seed": args.seed}
    profiles = spawn_fleet(_parse_model(args.model), args.count, seed=args.seed)
    save_fleet(profiles, args.path, spawns=[cfg_spawn])
    print(f"spawned {len(profiles)} devices -> {args.path}")
    return 0


def cmd_enroll(args) -> int:
    cfg = load_config(args.config)
    fleet = load_fleet(args.fleet)
    state = new_backend(_default_mapping(cfg.auth), cfg.auth, cfg.backend)
    service = svc.BackendService(state)
    rng = np.random.default_rng(args.seed)
    enroll_fleet_loopback(service, fleet, cfg.enroll_pairs, rng)
    save_backend(state, args.state)
    print(f"enrolled {len(fleet)} devices -> {args.state}")
    return 0


def cmd_serve(args) -> int:
    state = load_backend(args.state)
    server = svc.BackendServer((args.host, args.port), svc.BackendService(state))
    host, port = server.server_address[:2]
    print(f"serving on {host}:{port} ({len(state.devices)} devices)", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        if args.save_on_exit:
            save_backend(state, args.state)
            print(f"saved state -> {args.state}")
    return 0


def cmd_auth(args) -> int:
    state = load_backend(args.state)
    fleet = load_fleet(args.fleet)
    profile = _profile_by_id(fleet, args.device)
    rng = np.random.default_rng(args.seed)
    client = TokenClient(profile, state.auth_config, state.mapping_config, rng)
    payloads = tuple(bytes.fromhex(p) for p in args.payload)
    request = Request(operation=args.op, nonce=args.nonce, payloads=payloads)
    token = client.generate_token(request)
    result = authenticate(state, args.device, request, token)
    print(
        f"decision={result.decision.value} matched={result.matched}"
        f" required={result.required}"
    )
    if args.save:
        save_backend(state, args.state)
    return 0 if result.accepted else 1


def cmd_attack_replay(args) -> int:
    cfg = load_config(args.config)
    state, fleet, rng = _build_attack_arena(args, cfg)
    report = attacks.run_replay_attack(state, fleet[0], args.trials, rng)
    rows = [
        {
            "axis_value": "replay",
            "tpr": None,
            "fpr": None,
            "attack_rate": 1.0 - report.detection_rate,
            "seed": args.seed,
            "trials": args.trials,
        }
    ]
    return _finish_attack(args, "attack-replay", rows, [
        f"accepted_first={report.accepted_first}",
        f"replays_flagged={report.replays_flagged}",
        f"fresh_false_flags={report.fresh_false_flags}",
        f"detection_rate={report.detection_rate:.6f}",
    ])


def cmd_attack_tamper(args) -> int:
    from .experiments import TAMPER_SPEC

    mapping = MappingConfig(enabled_specs=(TAMPER_SPEC,), total_num=2)
    request = Request("UNLOCK", 77, (b"\xaa", b"\xbb"))
    rng = np.random.default_rng(args.seed)
    wins = sum(
        attacks.run_tamper_attack(request, mapping, args.budget, rng).succeeded
        for _ in range(args.trials)
    )
    d = 1
    for radix in TAMPER_SPEC.arg_radices:
        d *= radix
    predicted = attacks.closed_form_tamper_prob(d, args.budget)
    measured = wins / args.trials
    rows = [
        {
            "axis_value": args.budget,
            "tpr": None,
            "fpr": None,
            "attack_rate": measured,
            "seed": args.seed,
            "trials": args.trials,
        }
    ]
    return _finish_attack(args, "attack-tamper", rows, [
        f"task_space={d}",
        f"budget={args.budget}",
        f"measured_rate={measured:.6f}",
        f"closed_form_rate={predicted:.6f}",
    ])


def cmd_attack_mimic_hw(args) -> int:
    cfg = load_config(args.config)
    state, fleet, rng = _build_attack_arena(args, cfg)
    if args.cross_model:
        attacker = spawn_fleet(Model.MODEL_B, 1, seed=args.fleet_seed + 1,
                               first_id=len(fleet))[0]
        label = "cross-model"
    else:
        attacker = fleet[1]
        label = "same-model"
    rate = attacks.run_hw_mimic(attacker, fleet[0].device_id, state, args.trials, rng)
    rows = [
        {
            "axis_value": label,
            "tpr": None,
            "fpr": None,
            "attack_rate": rate,
            "seed": args.seed,
            "trials": args.trials,
        }
    ]
    return _finish_attack(args, "attack-mimic-hw", rows, [
        f"attacker={label}",
        f"acceptance_rate={rate:.6f}",
    ])


def cmd_attack_mimic_sw(args) -> int:
    cfg = load_config(args.config)
    state, fleet, rng = _build_attack_arena(args, cfg)
    traffic, _ = attacks.eavesdrop_traffic(
        fleet[0], state.auth_config, state.mapping_config, args.requests, rng,
        start_nonce=state.devices[0].last_nonce + 1,
    )
    rows, lines = [], []
    for strategy in attacks.ALL_STRATEGIES:
        mimic = attacks.train_sw_mimic(
            traffic, strategy, state.auth_config, state.mapping_config, cfg.backend, rng
        )
        rate = attacks.run_sw_mimic(mimic, strategy, state, 0, args.trials, rng)
        label = f"filter={int(strategy.filter_training)}:correct={int(strategy.correct_output)}"
        lines.append(f"{label} acceptance_rate={rate:.6f}")
        rows.append(
            {
                "axis_value": label,
                "tpr": None,
                "fpr": None,
                "attack_rate": rate,
                "seed": args.seed,
                "trials": args.trials,
            }
        )
    return _finish_attack(args, "attack-mimic-sw", rows, lines)


def cmd_attack_identify(args) -> int:
    cfg = load_config(args.config)
    state, fleet, rng = _build_attack_arena(args, cfg)
    pairs, poisoned = attacks.eavesdrop_traffic(
        fleet[0], state.auth_config, state.mapping_config, args.requests, rng,
        start_nonce=state.devices[0].last_nonce + 1,
    )
    labeled = [(task, value, flag) for (task, value), flag in zip(pairs, poisoned)]
    accuracy = attacks.identify_poison(
        labeled,
        args.method,
        auth_cfg=state.auth_config,
        mapping_cfg=state.mapping_config,
        backend_cfg=cfg.backend,
        oracle=fleet[1],
        rng=rng,
    )
    rows = [
        {
            "axis_value": args.method,
            "tpr": None,
            "fpr": None,
            "attack_rate": accuracy,
            "seed": args.seed,
            "trials": args.requests,
        }
    ]
    return _finish_attack(args, "attack-identify", rows, [
        f"method={args.method}",
        f"accuracy={accuracy:.6f}",
    ])


def _finish_attack(args, name: str, rows: list[dict], lines: list[str]) -> int:
    _emit(args, name, rows, lines)
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    spec = ExperimentSpec(
        name=args.experiment,
        model=_parse_model(args.model),
        device_count=args.devices,
        fleet_seed=args.fleet_seed,
        auth=cfg.auth,
        trials=args.trials,
        enroll_pairs=cfg.enroll_pairs,
        seed=args.seed,
        out_path=args.out,
    )
    csv_text = run_experiment(spec)
    if args.out:
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(csv_text)
    return 0


def cmd_report(args) -> int:
    with open(getattr(args, "in"), encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith("# fptoken-experiments schema="):
            raise ConfigError("not an experiment CSV (missing schema line)")
        reader = csv.DictReader(fh)
        rows = list(reader)
    print(header.lstrip("# "))
    if not rows:
        print("(no rows)")
        return 0
    widths = {c: max(len(c), *(len(r[c]) for r in rows)) for c in rows[0]}
    print("  ".join(c.ljust(widths[c]) for c in rows[0]))
    for row in rows:
        print("  ".join(row[c].ljust(widths[c]) for c in rows[0]))
    for column in ("tpr", "fpr", "attack_rate"):
        values = [float(r[column]) for r in rows if r.get(column)]
        if values:
            print(f"mean_{column}={sum(values) / len(values):.6f}")
    return 0


# ---- parser ----


def _add_arena_flags(parser) -> None:
    parser.add_argument("--devices", type=int, default=4)
    parser.add_argument("--model", default="MODEL_A")
    parser.add_argument("--fleet-seed", type=int, default=20)
    parser.add_argument("--pairs", type=int, default=600)
    parser.add_argument("--trials", type=int, default=200)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fptoken",
        description="Hardware-fingerprint token authentication toolkit",
    )
    parser.add_argument("--seed", type=int, default=0, help="master RNG seed")
    parser.add_argument("--config", default=None, help="versioned JSON config file")
    sub = parser.add_subparsers(dest="command", required=True)

    fleet = sub.add_parser("fleet", help="fleet management").add_subparsers(
        dest="fleet_command", required=True
    )
    spawn = fleet.add_parser("spawn", help="create a simulated device fleet")
    spawn.add_argument("--model", default="MODEL_A")
    spawn.add_argument("--count", type=int, default=10)
    spawn.add_argument("--path", default="fleet.json")
    spawn.set_defaults(func=cmd_fleet_spawn)

    enroll = sub.add_parser("enroll", help="enroll a fleet through the service loopback")
    enroll.add_argument("--fleet", default="fleet.json")
    enroll.add_argument("--state", default="state.bin")
    enroll.set_defaults(func=cmd_enroll)

    serve = sub.add_parser("serve", help="run the TCP verification service")
    serve.add_argument("--state", default="state.bin")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=7700)
    serve.add_argument("--save-on-exit", action="store_true")
    serve.set_defaults(func=cmd_serve)

    auth = sub.add_parser("auth", help="authenticate one request against saved state")
    auth.add_argument("--state", default="state.bin")
    auth.add_argument("--fleet", default="fleet.json")
    auth.add_argument("--device", type=int, required=True)
    auth.add_argument("--op", required=True)
    auth.add_argument("--nonce", type=int, required=True)
    auth.add_argument("--payload", action="append", required=True,
                      help="hex payload, repeatable")
    auth.add_argument("--save", action="store_true",
                      help="persist the advanced replay floor")
    auth.set_defaults(func=cmd_auth)

    attack = sub.add_parser("attack", help="run one attack scenario").add_subparsers(
        dest="attack_command", required=True
    )
    replay = attack.add_parser("replay")
    _add_arena_flags(replay)
    replay.add_argument("--out", default=None)
    replay.set_defaults(func=cmd_attack_replay)

    tamper = attack.add_parser("tamper")
    tamper.add_argument("--budget", type=int, default=20)
    tamper.add_argument("--trials", type=int, default=2000)
    tamper.add_argument("--out", default=None)
    tamper.set_defaults(func=cmd_attack_tamper)

    mimic_hw = attack.add_parser("mimic-hw")
    _add_arena_flags(mimic_hw)
    mimic_hw.add_argument("--cross-model", action="store_true")
    mimic_hw.add_argument("--out", default=None)
    mimic_hw.set_defaults(func=cmd_attack_mimic_hw)

    mimic_sw = attack.add_parser("mimic-sw")
    _add_arena_flags(mimic_sw)
    mimic_sw.add_argument("--requests", type=int, default=200)
    mimic_sw.add_argument("--out", default=None)
    mimic_sw.set_defaults(func=cmd_attack_mimic_sw)

    identify = attack.add_parser("identify")
    _add_arena_flags(identify)
    identify.add_argument("--requests", type=int, default=200)
    identify.add_argument(
        "--method",
        choices=(attacks.IdentifyMethod.SUPERVISED, attacks.IdentifyMethod.EXTRA_DEVICE),
        default=attacks.IdentifyMethod.SUPERVISED,
    )
    identify.add_argument("--out", default=None)
    identify.set_defaults(func=cmd_attack_identify)

    evaluate = sub.add_parser("eval", help="run a sweep experiment to CSV")
    evaluate.add_argument("experiment", choices=EXPERIMENT_NAMES)
    evaluate.add_argument("--devices", type=int, default=10)
    evaluate.add_argument("--model", default="MODEL_A")
    evaluate.add_argument("--fleet-seed", type=int, default=20)
    evaluate.add_argument("--trials", type=int, default=500)
    evaluate.add_argument("--out", default=None)
    evaluate.set_defaults(func=cmd_eval)

    report = sub.add_parser("report", help="pretty-print an experiment CSV")
    report.add_argument("--in", required=True)
    report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except BrokenPipeError:
        return 0
    except Exception as exc:  # noqa: BLE001 - single CLI error boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
