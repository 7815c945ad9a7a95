"""End-to-end acceptance gate for the framework's headline properties.

One test per pinned property, every empirical rate at a fixed seed with an
explicit tolerance, every test under an explicit wall-clock budget.  The
verbose pytest line of each test is the pass/fail record for its property;
run with -rA (or -s) to also see the measured numbers.
"""

import contextlib
import copy
import itertools
import pathlib
import time

import numpy as np
import pytest

from fptoken import service as svc
from fptoken.attacks import (
    ALL_STRATEGIES,
    AttackStrategy,
    closed_form_tamper_prob,
    eavesdrop_traffic,
    identify_poison,
    run_hw_mimic,
    run_replay_attack,
    run_sw_mimic,
    run_tamper_attack,
    train_sw_mimic,
)
from fptoken.backend import (
    CalibrationStats,
    Decision,
    DeviceRecord,
    FeatureRecord,
    RelativeErrorVerifier,
    authenticate,
    fit_linear_least_squares,
    load_backend,
    new_backend,
    save_backend,
    verify_one,
)
from fptoken.client import (
    AuthConfig,
    Request,
    Token,
    TokenClient,
    TokenEntry,
    decode_token,
    encode_token,
    generate_token_with_mask,
)
from fptoken.experiments import ExperimentSpec, build_arena, scaled_token
from fptoken.hwsim import (
    Analog,
    Bits32,
    Feature,
    Model,
    TrainingPair,
    collect_pairs,
    default_task_specs,
    execute_task,
    spawn_fleet,
)
from fptoken.mapping import (
    HardwareTask,
    MappingConfig,
    MappingVariant,
    TaskSpec,
    ap_hash,
    map_message,
)

VECTORS = pathlib.Path(__file__).parent / "vectors"

ARENA_SEED = 1


@contextlib.contextmanager
def budget(seconds):
    """Fail the test if its body exceeds the stated wall-clock budget."""
    t0 = time.perf_counter()
    yield
    elapsed = time.perf_counter() - t0
    assert elapsed < seconds, f"runtime {elapsed:.1f}s exceeds {seconds}s budget"


@pytest.fixture(scope="session")
def arena():
    """Ten enrolled same-model devices at the default operating point.

    Built once; tests deepcopy the state before mutating nonce counters so
    every measurement starts from the same pristine snapshot.
    """
    spec = ExperimentSpec(name="features", device_count=10, trials=500,
                          enroll_pairs=1000, seed=ARENA_SEED)
    service, fleet, _ = build_arena(spec)
    return service.state, fleet


def honest_token(profile, request, mapping_cfg, rng):
    """All entries raw: the no-poisoning presentation baseline."""
    tasks = map_message(request, mapping_cfg)
    return Token(nonce=request.nonce, entries=tuple(
        TokenEntry(i, execute_task(profile, task, rng))
        for i, task in enumerate(tasks)))


def test_c01_least_squares_recovers_transformed_line():
    """OLS on fully transformed pairs returns exactly the transformed line."""
    with budget(1.0):
        rng = np.random.default_rng(101)
        worst = 0.0
        for _ in range(100):
            a = float(rng.uniform(0.5, 3.0)) * (1 if rng.random() < 0.5 else -1)
            b = float(rng.uniform(0.5, 2.5))
            c = float(rng.uniform(1.05, 1.5))
            d = float(rng.uniform(0.1, 2.0))
            x = rng.uniform(1.0, 10.0, size=50)
            y = c * (a * x + b) + d
            slope, intercept = fit_linear_least_squares(x, y)
            worst = max(worst,
                        abs(slope - c * a) / abs(c * a),
                        abs(intercept - (c * b + d)) / abs(c * b + d))
        print(f"c01: worst relative error {worst:.3e}")
        assert worst < 1e-9


def test_c02_analytic_deviation_matches_and_gates_rejection():
    """Delta = (c-1) + |d/(ax+b)| equals the measured relative deviation and
    is exactly the quantity the threshold verifier gates on."""
    with budget(1.0):
        rng = np.random.default_rng(102)
        pwm_spec = TaskSpec(Feature.PWM, (4, 16, 16, 2, 2))
        state = new_backend(MappingConfig(enabled_specs=(pwm_spec,)))

        class LinePredictor:
            def __init__(self, a, b, xs):
                self.a, self.b, self.xs = a, b, xs

            def predict(self, args):
                return self.a * self.xs[args[0]] + self.b

        a = float(rng.uniform(0.5, 3.0))
        b = float(rng.uniform(0.5, 2.0))
        xs = rng.uniform(1.0, 10.0, size=1000)
        predictor = LinePredictor(a, b, xs)
        stats = CalibrationStats(0, 0, 1.0, None, 0.0)
        worst = 0.0
        boundary_ok = 0
        for i in range(1000):
            c = float(rng.uniform(1.0001, 1.2))
            d = float(rng.uniform(0.0, 0.5))
            y = a * xs[i] + b
            y_poisoned = c * y + d
            measured = abs(y_poisoned - y) / abs(y)
            delta = (c - 1.0) + abs(d / y)
            worst = max(worst, abs(measured - delta))
            # place tau a safe margin above or below delta and check the
            # verifier lands on the matching side
            above = bool(rng.random() < 0.5)
            tau = delta * (1.01 if above else 0.99)
            verifier = RelativeErrorVerifier(tau=tau, floor=0.0)
            record = FeatureRecord(pwm_spec, predictor, verifier, stats)
            state.devices[7] = DeviceRecord(7, {Feature.PWM: record})
            task = HardwareTask(Feature.PWM, (i,))
            accepted = verify_one(state, 7, task, Analog(y_poisoned))
            boundary_ok += accepted == (delta <= tau)
        print(f"c02: worst |measured - delta| {worst:.3e}, "
              f"boundary agreement {boundary_ok}/1000")
        assert worst < 1e-9
        assert boundary_ok == 1000


def test_c03_tamper_closed_form_and_monte_carlo():
    """Closed-form collision probability, cross-checked by seeded search on
    a shrunk task space."""
    with budget(120.0):
        cf = closed_form_tamper_prob(20000, 10**7)
        assert 0.024 <= cf <= 0.025

        tamper_map = MappingConfig(
            enabled_specs=(TaskSpec(Feature.RTC_PHA, (5, 4, 5)),),
            total_num=2, variant=MappingVariant.FULL)
        rng = np.random.default_rng(3)
        searches, per_budget = 2500, 40
        wins = 0
        for _ in range(searches):
            req = Request(rng.bytes(4).hex(), int(rng.integers(1, 1 << 31)),
                          (rng.bytes(4), rng.bytes(4)))
            wins += run_tamper_attack(req, tamper_map, per_budget, rng).succeeded
        p_hat = wins / searches
        p_exp = closed_form_tamper_prob(100, per_budget)
        se = (p_exp * (1.0 - p_exp) / searches) ** 0.5
        print(f"c03: closed form {cf:.6f}; MC {p_hat:.5f} vs {p_exp:.5f} "
              f"({abs(p_hat - p_exp) / se:.2f} SE, {searches * per_budget} attempts)")
        assert abs(p_hat - p_exp) <= 3.0 * se


def test_c04_poisoned_tokens_rejected_and_zero_noise_is_honest(arena):
    """Tokens with every entry poisoned at the floor noise are rejected;
    scaling by exactly zero noise reproduces honest acceptance bit for bit."""
    with budget(120.0):
        pristine, fleet = arena
        mapping_cfg = pristine.mapping_config
        rates = {}
        for noise in (0.08, 0.12):
            state = copy.deepcopy(pristine)
            rng = np.random.default_rng(ARENA_SEED + 500)
            accepted = 0
            for t in range(1000):
                victim = t % len(fleet)
                req = Request("measure", 100000 + t, (rng.bytes(4),))
                tok = scaled_token(fleet[victim], req, noise, mapping_cfg, rng)
                accepted += authenticate(state, victim, req, tok).accepted
            rates[noise] = accepted / 1000
        # the client's own poison transform (noise AND additive constant)
        # applied to every entry must also land under the 2% line
        state = copy.deepcopy(pristine)
        rng = np.random.default_rng(ARENA_SEED + 502)
        all_poisoned = np.zeros(pristine.auth_config.total_num, dtype=bool)
        accepted = 0
        for t in range(1000):
            victim = t % len(fleet)
            req = Request("measure", 300000 + t, (rng.bytes(4),))
            tok = generate_token_with_mask(fleet[victim], req, all_poisoned,
                                           pristine.auth_config, mapping_cfg, rng)
            accepted += authenticate(state, victim, req, tok).accepted
        rates["full-transform"] = accepted / 1000

        accepts = []
        for maker in (lambda p, r, g: scaled_token(p, r, 0.0, mapping_cfg, g),
                      lambda p, r, g: honest_token(p, r, mapping_cfg, g)):
            state = copy.deepcopy(pristine)
            rng = np.random.default_rng(ARENA_SEED + 501)
            accepted = 0
            for t in range(1000):
                victim = t % len(fleet)
                req = Request("measure", 200000 + t, (rng.bytes(4),))
                accepted += authenticate(state, victim, req,
                                         maker(fleet[victim], req, rng)).accepted
            accepts.append(accepted)
        print(f"c04: acceptance {rates}, zero-noise {accepts[0]}/1000 "
              f"vs honest {accepts[1]}/1000")
        assert rates[0.08] < 0.02
        assert rates[0.12] < 0.02
        assert rates["full-transform"] < 0.02
        assert accepts[0] == accepts[1]


def test_c05_authentication_separation(arena):
    """Legitimate devices pass, same-model impostors fail, at defaults."""
    with budget(300.0):
        pristine, fleet = arena
        state = copy.deepcopy(pristine)
        rng = np.random.default_rng(ARENA_SEED + 100)
        clients = [TokenClient(p, state.auth_config, state.mapping_config, rng)
                   for p in fleet]
        nonces = itertools.count(1)
        tp = fp = 0
        for t in range(500):
            victim = t % len(fleet)
            req = Request("measure", next(nonces), (rng.bytes(4),))
            tp += authenticate(state, victim, req,
                               clients[victim].generate_token(req)).accepted
        for t in range(500):
            victim = t % len(fleet)
            other = (victim + 1 + int(rng.integers(len(fleet) - 1))) % len(fleet)
            req = Request("measure", next(nonces), (rng.bytes(4),))
            fp += authenticate(state, victim, req,
                               clients[other].generate_token(req)).accepted
        print(f"c05: TPR {tp / 500:.3f} (>= 0.95), FPR {fp / 500:.3f} (<= 0.10)")
        assert tp / 500 >= 0.95
        assert fp / 500 <= 0.10


def test_c06_replay_detection_is_total_and_deterministic(arena):
    """Every replayed accepted presentation is flagged, fresh nonces never."""
    pristine, fleet = arena
    reports = []
    for _ in range(2):
        state = copy.deepcopy(pristine)
        report = run_replay_attack(state, fleet[0], 200,
                                   np.random.default_rng(ARENA_SEED + 600))
        reports.append(report)
    first = reports[0]
    print(f"c06: {first.accepted_first} accepted firsts, "
          f"{first.replays_flagged} flagged, "
          f"{first.fresh_false_flags} false flags")
    assert first.accepted_first > 0
    assert first.detection_rate == 1.0
    assert first.replays_flagged == first.accepted_first
    assert first.fresh_false_flags == 0
    assert reports[0] == reports[1]


def test_c07_hardware_mimic_bounded(arena):
    """Identical-model hardware barely passes as the victim; a different
    model never does."""
    with budget(300.0):
        pristine, fleet = arena
        state = copy.deepcopy(pristine)
        same = run_hw_mimic(fleet[1], 0, state, 500,
                            np.random.default_rng(ARENA_SEED + 200))
        cross_dev = spawn_fleet(Model.MODEL_B, 1, seed=ARENA_SEED + 5,
                                first_id=10)[0]
        cross = run_hw_mimic(cross_dev, 0, state, 500,
                             np.random.default_rng(ARENA_SEED + 201))
        print(f"c07: same-model {same:.3f} (<= 0.11), "
              f"cross-model {cross:.3f} (<= 0.01)")
        assert same <= 0.11
        assert cross <= 0.01


def test_c08_poisoning_degrades_software_mimicry(arena):
    """An eavesdropper trained on poisoned traffic does at most half as well
    as one trained on clean traffic, at equal traffic volume, paired seeds."""
    with budget(600.0):
        pristine, fleet = arena
        state = copy.deepcopy(pristine)
        auth_cfg = state.auth_config
        mapping_cfg = state.mapping_config
        clean_cfg = AuthConfig(used_num=auth_cfg.total_num,
                               accept_num=auth_cfg.accept_num)
        clean_pairs, _ = eavesdrop_traffic(
            fleet[0], clean_cfg, mapping_cfg, 200,
            np.random.default_rng(ARENA_SEED + 300))
        poison_pairs, _ = eavesdrop_traffic(
            fleet[0], auth_cfg, mapping_cfg, 200,
            np.random.default_rng(ARENA_SEED + 300))
        baseline = AttackStrategy(False, False)
        clean_mimic = train_sw_mimic(clean_pairs, baseline, clean_cfg,
                                     mapping_cfg, state.config,
                                     np.random.default_rng(ARENA_SEED + 301))
        clean_rate = run_sw_mimic(clean_mimic, baseline, state, 0, 500,
                                  np.random.default_rng(ARENA_SEED + 302))
        poisoned_rates = []
        for strategy in ALL_STRATEGIES:
            mimic = train_sw_mimic(poison_pairs, strategy, auth_cfg,
                                   mapping_cfg, state.config,
                                   np.random.default_rng(ARENA_SEED + 301))
            poisoned_rates.append(
                run_sw_mimic(mimic, strategy, state, 0, 500,
                             np.random.default_rng(ARENA_SEED + 302)))
        best = max(poisoned_rates)
        print(f"c08: clean {clean_rate:.3f}, poisoned best {best:.3f} "
              f"of {[f'{r:.3f}' for r in poisoned_rates]}")
        assert clean_rate > 0.0
        assert best <= 0.5 * clean_rate


def test_c09_poison_identification_resistance(arena):
    """Poisoned pairs stay near-unidentifiable under default noise; the
    extra-device classifier only wins when the noise is oversized."""
    with budget(300.0):
        pristine, fleet = arena
        auth_cfg = pristine.auth_config
        mapping_cfg = pristine.mapping_config
        pairs, flags = eavesdrop_traffic(
            fleet[0], auth_cfg, mapping_cfg, 400,
            np.random.default_rng(ARENA_SEED + 400))
        labeled = [(task, value, f) for (task, value), f in zip(pairs, flags)]
        supervised = identify_poison(
            labeled, "supervised", auth_cfg=auth_cfg, mapping_cfg=mapping_cfg,
            backend_cfg=pristine.config,
            rng=np.random.default_rng(ARENA_SEED + 401))
        extra_default = identify_poison(
            labeled, "extra-device", auth_cfg=auth_cfg, mapping_cfg=mapping_cfg,
            backend_cfg=pristine.config, oracle=fleet[1],
            rng=np.random.default_rng(ARENA_SEED + 402))
        oversized_cfg = AuthConfig(noise_lo=0.6, noise_hi=1.2)
        oversized_map = MappingConfig(
            enabled_specs=(TaskSpec(Feature.RTC_FRE, (4, 8, 16, 8)),),
            total_num=oversized_cfg.total_num)
        big_pairs, big_flags = eavesdrop_traffic(
            fleet[0], oversized_cfg, oversized_map, 400,
            np.random.default_rng(ARENA_SEED + 403))
        big_labeled = [(t, v, f) for (t, v), f in zip(big_pairs, big_flags)]
        extra_oversized = identify_poison(
            big_labeled, "extra-device", auth_cfg=oversized_cfg,
            mapping_cfg=oversized_map, backend_cfg=pristine.config,
            oracle=fleet[1], rng=np.random.default_rng(ARENA_SEED + 404))
        print(f"c09: supervised {supervised:.3f} (<= 0.6), extra-device "
              f"default {extra_default:.3f} (< 0.85), "
              f"oversized {extra_oversized:.3f} (>= 0.85)")
        assert supervised <= 0.6
        assert extra_default < 0.85
        assert extra_oversized >= 0.85


def test_c10_mapping_integrity_goldens_and_flip_sensitivity():
    """Every frozen byte vector still reproduces, and a one-byte operation
    flip reshuffles the task list essentially always."""
    with budget(60.0):
        # hash goldens
        for data, want in ((b"", 0xAAAAAAAA), (b"a", 0xEAAAAA9F),
                           (b"abc", 0x25C7FF88), (b"\x00", 0xFFFFFFAA),
                           (b"\x00\x00\x00\x01", 0xDA0D708B)):
            assert ap_hash(data) == want, data

        # mapped task list golden, all variants
        import csv
        with open(VECTORS / "mapping.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        by_variant = {}
        for row in rows:
            args = tuple(int(a) for a in row["args"].split(";"))
            by_variant.setdefault(row["variant"], []).append(
                HardwareTask(Feature(row["feature"]), args))
        request = Request(operation="UNLOCK", nonce=1, payloads=(b"\x01", b"\x02"))
        for variant in MappingVariant:
            cfg = MappingConfig(enabled_specs=default_task_specs(), variant=variant)
            assert map_message(request, cfg) == by_variant[variant.value], variant

        # token bytes golden
        token = Token(nonce=0x01020304, entries=(
            TokenEntry(0, Analog(1.5)),
            TokenEntry(1, Bits32(0x12345678)),
            TokenEntry(2, Analog(-0.25))))
        token_blob = (VECTORS / "token.bin").read_bytes()
        assert encode_token(token) == token_blob
        assert decode_token(token_blob) == token

        # frame stream golden
        frames_blob = (VECTORS / "frames.bin").read_bytes()
        pairs = [TrainingPair(Feature.RTC_PHA, (1, 2, 3), Analog(0.5)),
                 TrainingPair(Feature.RTC_PHA, (0, 1, 0), Bits32(0xDEADBEEF))]
        wire_req = Request(operation="UNLOCK", nonce=0x01020304,
                           payloads=(b"\xaa\xbb",))
        rebuilt = b"".join([
            svc.encode_frame(svc.Kind.ENROLL_BEGIN, svc.enroll_begin_body(7)),
            svc.encode_frame(svc.Kind.ENROLL_DATA,
                             svc.enroll_data_body(7, Feature.RTC_PHA, pairs)),
            svc.encode_frame(svc.Kind.ENROLL_COMMIT, svc.enroll_commit_body(7)),
            svc.encode_frame(svc.Kind.AUTH_REQUEST,
                             svc.auth_request_body(7, wire_req, token)),
            svc.encode_frame(svc.Kind.REPLY,
                             svc.auth_reply_body(7, Decision.ACCEPT, 3, 3)),
            svc.encode_frame(svc.Kind.ERROR,
                             svc.error_body(svc.ErrorCode.PROTOCOL_ORDER,
                                            "enroll-data before enroll-begin")),
        ])
        assert rebuilt == frames_blob

        # flip sensitivity over the full task space
        full_map = MappingConfig(enabled_specs=default_task_specs(), total_num=10)
        rng = np.random.default_rng(10)
        alphabet = "abcdefghijklmnopqrstuvwxyz0123456789"
        changed = 0
        n_requests = 10**4
        for _ in range(n_requests):
            op = "".join(alphabet[i] for i in rng.integers(0, len(alphabet), 8))
            req = Request(op, int(rng.integers(1, 1 << 31)), (rng.bytes(4),))
            pos = int(rng.integers(len(op)))
            repl = alphabet[int(rng.integers(len(alphabet)))]
            while repl == op[pos]:
                repl = alphabet[int(rng.integers(len(alphabet)))]
            flipped = Request(op[:pos] + repl + op[pos + 1:], req.nonce,
                              req.payloads)
            changed += map_message(req, full_map) != map_message(flipped, full_map)
        print(f"c10: goldens byte-exact; {changed}/{n_requests} flips "
              f"changed the task list")
        assert changed >= 0.99 * n_requests


def test_c11_digest_ablations_are_weaker():
    """Dropping chain stages can only help the tamper attacker: the full
    digest's success rate sits at or below both ablations, by 3 sigma."""
    with budget(300.0):
        rates = {}
        n, per_budget = 800, 30
        for variant in (MappingVariant.FULL, MappingVariant.OP_CHAIN_ONLY,
                        MappingVariant.NO_BWD_PAYLOAD):
            cfg = MappingConfig(
                enabled_specs=(TaskSpec(Feature.RTC_PHA, (5, 4, 5)),),
                total_num=2, variant=variant)
            rng = np.random.default_rng(11)
            wins = 0
            for _ in range(n):
                req = Request(rng.bytes(4).hex(), int(rng.integers(1, 1 << 31)),
                              (rng.bytes(4), rng.bytes(4)))
                wins += run_tamper_attack(req, cfg, per_budget, rng).succeeded
            rates[variant] = wins / n

        def three_sigma_leq(p_low, p_high):
            se = ((p_low * (1 - p_low) + p_high * (1 - p_high)) / n) ** 0.5
            return p_low <= p_high + 3.0 * se

        full = rates[MappingVariant.FULL]
        h1 = rates[MappingVariant.OP_CHAIN_ONLY]
        h1h2 = rates[MappingVariant.NO_BWD_PAYLOAD]
        print(f"c11: full {full:.4f}, op-chain-only {h1:.4f}, "
              f"no-bwd-payload {h1h2:.4f} ({n}x{per_budget} each)")
        assert three_sigma_leq(full, h1)
        assert three_sigma_leq(full, h1h2)
        assert full <= h1 and full <= h1h2


def test_c12_service_robustness_and_snapshot(arena, tmp_path):
    """Garbage never crashes the service or mints an accept; the live-socket
    enrollment lifecycle works; snapshots preserve decisions and replay state."""
    with budget(120.0):
        pristine, fleet = arena
        state = copy.deepcopy(pristine)
        service = svc.BackendService(state)

        # 10^4 malformed or random frames against the dispatch boundary
        rng = np.random.default_rng(ARENA_SEED + 700)
        accepts = 0
        for i in range(10**4):
            if i % 2 == 0:
                kind = int(rng.integers(0, 6))
                body = rng.bytes(int(rng.integers(0, 64)))
            else:
                raw = rng.bytes(int(rng.integers(0, 48)))
                try:
                    kind, body = svc.decode_frame(raw)
                except svc.FrameError:
                    continue
                kind = int(kind)
            reply_kind, reply_body = service.handle_message(kind, body)
            assert reply_kind in (svc.Kind.REPLY, svc.Kind.ERROR)
            if kind == svc.Kind.AUTH_REQUEST and reply_kind == svc.Kind.REPLY:
                accepts += svc.parse_auth_reply(reply_body).decision is Decision.ACCEPT
        assert accepts == 0

        # live socket: enroll a new device, observe sealing, authenticate
        newcomer = spawn_fleet(Model.MODEL_A, 1, seed=77, first_id=10)[0]
        enroll_rng = np.random.default_rng(ARENA_SEED + 701)
        pairs = {}
        for spec in state.mapping_config.enabled_specs:
            n = 3 * spec.arg_radices[0] if spec.feature is Feature.SRAM else 400
            pairs[spec.feature] = collect_pairs(newcomer, spec, n, enroll_rng)
        server = svc.BackendServer(("127.0.0.1", 0), service)
        server.serve_in_background()
        try:
            with svc.BackendClient(server.server_address) as client:
                client.enroll(10, pairs)
                with pytest.raises(RuntimeError, match="SEALED_DEVICE"):
                    client.enroll_begin(10)
                token_client = TokenClient(newcomer, state.auth_config,
                                           state.mapping_config, enroll_rng)
                request = Request("unlock", 50, (b"\x42",))
                token = token_client.generate_token(request)
                assert client.authenticate(10, request, token).accepted
        finally:
            server.shutdown()
            server.server_close()

        # snapshot: decisions and replay state survive a save/load cycle
        forged_req = Request("unlock", 60, (b"\x43",))
        forged = Token(nonce=60, entries=tuple(
            TokenEntry(i, Analog(123.456))
            for i in range(state.auth_config.total_num)))
        before = authenticate(state, 10, forged_req, forged).decision
        save_backend(state, str(tmp_path / "backend.bin"))
        restored = load_backend(str(tmp_path / "backend.bin"))
        replayed = authenticate(restored, 10, request, token)
        assert replayed.decision is Decision.REPLAY_DETECTED
        after = authenticate(restored, 10, forged_req, forged).decision
        assert after == before
        fresh_req = Request("unlock", 70, (b"\x44",))
        fresh = authenticate(restored, 10, fresh_req,
                             token_client.generate_token(fresh_req))
        assert fresh.decision is Decision.ACCEPT
        print("c12: 10^4 frames, zero crashes, zero accepts; "
              "socket lifecycle ok; snapshot preserves decisions and replay")
