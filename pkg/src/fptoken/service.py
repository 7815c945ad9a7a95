"""Framed wire protocol and TCP service around the verification backend.

Frames are length-prefixed: a 4-byte big-endian length (body size + 1, at
most 1 MiB), one kind byte, then the body.  The protocol is strict
request/reply: every request frame gets exactly one Reply or Error frame,
in order, per connection.

Enrollment is a three-step handshake per device: EnrollBegin opens a
staging buffer, EnrollData appends training pairs (chunked to respect the
frame cap), EnrollCommit trains, calibrates, and seals the device.  Sealed
devices never accept further training data; that is the protocol-level
embodiment of the secure-enrollment assumption.

The channel is deliberately plaintext: the design assumes eavesdroppers and
defends with poisoning, not encryption.
"""

from __future__ import annotations

import enum
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass

from .mapping import Feature, Request
from .hwsim import Analog, Bits32, FingerprintValue, TrainingPair
from .client import MalformedToken, Token, decode_token, encode_token
from .backend import BackendState, Decision, authenticate, enroll_device

MAX_FRAME = 1 << 20


class FrameError(ValueError):
    """Bytes violate the frame layout."""


class Truncated(FrameError):
    """Frame shorter than its declared or minimum length."""


class Oversized(FrameError):
    """Declared frame length exceeds the 1 MiB cap."""


class UnknownKind(FrameError):
    """Frame kind byte outside the protocol."""


class ProtocolOrder(ValueError):
    """Enrollment step arrived outside begin -> data -> commit order."""


class SealedDevice(ValueError):
    """Training data offered for a device that already committed."""


class Kind(enum.IntEnum):
    ENROLL_BEGIN = 0
    ENROLL_DATA = 1
    ENROLL_COMMIT = 2
    AUTH_REQUEST = 3
    REPLY = 4
    ERROR = 5


class ErrorCode(enum.IntEnum):
    MALFORMED = 0
    PROTOCOL_ORDER = 1
    SEALED_DEVICE = 2
    UNKNOWN_DEVICE = 3
    INTERNAL = 4


# wire ids are frozen independently of enum declaration order
FEATURE_CODES = {
    Feature.DAC_ADC: 0,
    Feature.FPU: 1,
    Feature.PWM: 2,
    Feature.RTC_FRE: 3,
    Feature.RTC_PHA: 4,
    Feature.SRAM: 5,
}
CODE_FEATURES = {v: k for k, v in FEATURE_CODES.items()}

DECISION_CODES = {
    Decision.ACCEPT: 0,
    Decision.BELOW_THRESHOLD: 1,
    Decision.REPLAY_DETECTED: 2,
    Decision.MALFORMED_TOKEN: 3,
    Decision.UNKNOWN_DEVICE: 4,
}
CODE_DECISIONS = {v: k for k, v in DECISION_CODES.items()}


def encode_frame(kind: int, body: bytes) -> bytes:
    if len(body) + 1 > MAX_FRAME:
        raise Oversized(f"frame body of {len(body)} bytes exceeds the cap")
    return struct.pack(">IB", len(body) + 1, int(kind)) + body


def decode_frame(data: bytes) -> tuple[int, bytes]:
    """Split one complete frame into (kind, body); reject anything off."""

    if len(data) < 5:
        raise Truncated("frame shorter than its fixed header")
    (length,) = struct.unpack_from(">I", data, 0)
    if length > MAX_FRAME:
        raise Oversized(f"declared length {length} exceeds the cap")
    if length < 1:
        raise Truncated("declared length leaves no room for the kind byte")
    if len(data) != 4 + length:
        raise Truncated("frame length prefix disagrees with payload size")
    kind = data[4]
    if kind not in Kind._value2member_map_:
        raise UnknownKind(f"frame kind {kind} is not part of the protocol")
    return kind, data[5:]


# ---- body layouts ----


def _pack_value(value: FingerprintValue) -> bytes:
    if isinstance(value, Analog):
        return struct.pack(">B", 0) + struct.pack("<d", value.value)
    return struct.pack(">B", 1) + struct.pack("<I", value.word)


def _unpack_value(body: bytes, pos: int) -> tuple[FingerprintValue, int]:
    if pos + 1 > len(body):
        raise Truncated("value tag missing")
    tag = body[pos]
    pos += 1
    if tag == 0:
        if pos + 8 > len(body):
            raise Truncated("analog value truncated")
        (x,) = struct.unpack_from("<d", body, pos)
        return Analog(x), pos + 8
    if tag == 1:
        if pos + 4 > len(body):
            raise Truncated("word value truncated")
        (w,) = struct.unpack_from("<I", body, pos)
        return Bits32(w), pos + 4
    raise FrameError(f"unknown value tag {tag}")


def enroll_begin_body(device_id: int) -> bytes:
    return struct.pack(">H", device_id)


def enroll_data_body(device_id: int, feature: Feature, pairs: list[TrainingPair]) -> bytes:
    out = [struct.pack(">HBH", device_id, FEATURE_CODES[feature], len(pairs))]
    for pair in pairs:
        out.append(struct.pack(">B", len(pair.args)))
        out.append(struct.pack(f">{len(pair.args)}H", *pair.args))
        out.append(_pack_value(pair.fingerprint))
    return b"".join(out)


def enroll_commit_body(device_id: int) -> bytes:
    return struct.pack(">H", device_id)


def auth_request_body(device_id: int, request: Request, token: Token) -> bytes:
    op = request.operation.encode("utf-8")
    out = [struct.pack(">HB", device_id, len(op)), op,
           struct.pack(">IB", request.nonce, len(request.payloads))]
    for payload in request.payloads:
        out.append(struct.pack(">H", len(payload)))
        out.append(payload)
    out.append(encode_token(token))
    return b"".join(out)


def _parse_device_id(body: bytes) -> int:
    if len(body) != 2:
        raise Truncated("expected exactly a 2-byte device id")
    return struct.unpack(">H", body)[0]


def parse_enroll_data(body: bytes) -> tuple[int, Feature, list[TrainingPair]]:
    if len(body) < 5:
        raise Truncated("enroll-data header missing")
    device_id, feature_code, count = struct.unpack_from(">HBH", body, 0)
    if feature_code not in CODE_FEATURES:
        raise FrameError(f"unknown feature code {feature_code}")
    feature = CODE_FEATURES[feature_code]
    pos = 5
    pairs = []
    for _ in range(count):
        if pos + 1 > len(body):
            raise Truncated("pair record truncated")
        n_args = body[pos]
        pos += 1
        if n_args == 0:
            raise FrameError("pair record with no arguments")
        if pos + 2 * n_args > len(body):
            raise Truncated("argument vector truncated")
        args = struct.unpack_from(f">{n_args}H", body, pos)
        pos += 2 * n_args
        value, pos = _unpack_value(body, pos)
        pairs.append(TrainingPair(feature, tuple(int(a) for a in args), value))
    if pos != len(body):
        raise FrameError("trailing bytes after last pair record")
    return device_id, feature, pairs


def parse_auth_request(body: bytes) -> tuple[int, Request, Token]:
    if len(body) < 3:
        raise Truncated("auth-request header missing")
    device_id, op_len = struct.unpack_from(">HB", body, 0)
    pos = 3
    if pos + op_len > len(body):
        raise Truncated("operation string truncated")
    try:
        operation = body[pos:pos + op_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FrameError("operation is not valid UTF-8") from exc
    pos += op_len
    if pos + 5 > len(body):
        raise Truncated("nonce/payload header truncated")
    nonce, n_payloads = struct.unpack_from(">IB", body, pos)
    pos += 5
    payloads = []
    for _ in range(n_payloads):
        if pos + 2 > len(body):
            raise Truncated("payload length truncated")
        (plen,) = struct.unpack_from(">H", body, pos)
        pos += 2
        if pos + plen > len(body):
            raise Truncated("payload bytes truncated")
        payloads.append(body[pos:pos + plen])
        pos += plen
    try:
        request = Request(operation=operation, nonce=nonce, payloads=tuple(payloads))
    except ValueError as exc:
        raise FrameError(f"invalid request: {exc}") from exc
    try:
        token = decode_token(body[pos:])
    except MalformedToken as exc:
        raise FrameError(f"invalid token: {exc}") from exc
    return device_id, request, token


def error_body(code: ErrorCode, message: str) -> bytes:
    msg = message.encode("utf-8")[:512]
    return struct.pack(">BH", int(code), len(msg)) + msg


def parse_error(body: bytes) -> tuple[ErrorCode, str]:
    if len(body) < 3:
        raise Truncated("error body truncated")
    code, msg_len = struct.unpack_from(">BH", body, 0)
    if len(body) != 3 + msg_len:
        raise Truncated("error message truncated")
    return ErrorCode(code), body[3:].decode("utf-8", errors="replace")


def enroll_ack_body(device_id: int, step: int, detail: int) -> bytes:
    return struct.pack(">HBI", device_id, step, detail)


def auth_reply_body(device_id: int, decision: Decision, matched: int, required: int) -> bytes:
    return struct.pack(">HBBB", device_id, DECISION_CODES[decision], matched, required)


@dataclass(frozen=True)
class WireAuthResult:
    device_id: int
    decision: Decision
    matched: int
    required: int

    @property
    def accepted(self) -> bool:
        return self.decision is Decision.ACCEPT


def parse_auth_reply(body: bytes) -> WireAuthResult:
    if len(body) != 5:
        raise Truncated("auth reply must be exactly 5 bytes")
    device_id, code, matched, required = struct.unpack(">HBBB", body)
    if code not in CODE_DECISIONS:
        raise FrameError(f"unknown decision code {code}")
    return WireAuthResult(device_id, CODE_DECISIONS[code], matched, required)


# ---- server-side state machine ----


class BackendService:
    """Protocol handler: staging buffers plus the shared backend state.

    handle_message never raises; every failure path is an Error frame, so a
    hostile byte stream cannot crash the server or sneak an acceptance.
    """

    def __init__(self, state: BackendState):
        self.state = state
        self._staging: dict[int, dict[Feature, list[TrainingPair]]] = {}
        self._lock = threading.RLock()

    def handle_message(self, kind: int, body: bytes) -> tuple[int, bytes]:
        with self._lock:
            try:
                return self._dispatch(kind, body)
            except FrameError as exc:
                return Kind.ERROR, error_body(ErrorCode.MALFORMED, str(exc))
            except ProtocolOrder as exc:
                return Kind.ERROR, error_body(ErrorCode.PROTOCOL_ORDER, str(exc))
            except SealedDevice as exc:
                return Kind.ERROR, error_body(ErrorCode.SEALED_DEVICE, str(exc))
            except Exception as exc:  # noqa: BLE001 - robustness boundary
                return Kind.ERROR, error_body(ErrorCode.INTERNAL, str(exc))

    def _dispatch(self, kind: int, body: bytes) -> tuple[int, bytes]:
        if kind == Kind.ENROLL_BEGIN:
            device_id = _parse_device_id(body)
            if device_id in self.state.devices:
                raise SealedDevice(f"device {device_id} is already enrolled")
            if device_id in self._staging:
                raise ProtocolOrder(f"device {device_id} is already mid-enrollment")
            self._staging[device_id] = {}
            return Kind.REPLY, enroll_ack_body(device_id, 0, 0)

        if kind == Kind.ENROLL_DATA:
            device_id, feature, pairs = parse_enroll_data(body)
            if device_id in self.state.devices:
                raise SealedDevice(f"device {device_id} is sealed; training is closed")
            if device_id not in self._staging:
                raise ProtocolOrder("enroll-data before enroll-begin")
            bucket = self._staging[device_id].setdefault(feature, [])
            bucket.extend(pairs)
            total = sum(len(v) for v in self._staging[device_id].values())
            return Kind.REPLY, enroll_ack_body(device_id, 1, total)

        if kind == Kind.ENROLL_COMMIT:
            device_id = _parse_device_id(body)
            if device_id in self.state.devices:
                raise SealedDevice(f"device {device_id} is already enrolled")
            if device_id not in self._staging:
                raise ProtocolOrder("enroll-commit before enroll-begin")
            # staging is consumed either way; a failed commit restarts at begin
            staged = self._staging.pop(device_id)
            enroll_device(self.state, device_id, staged)
            return Kind.REPLY, enroll_ack_body(device_id, 2, len(staged))

        if kind == Kind.AUTH_REQUEST:
            device_id, request, token = parse_auth_request(body)
            if device_id not in self.state.devices:
                return Kind.ERROR, error_body(
                    ErrorCode.UNKNOWN_DEVICE, f"device {device_id} is not enrolled"
                )
            result = authenticate(self.state, device_id, request, token)
            return Kind.REPLY, auth_reply_body(
                device_id, result.decision, result.matched, result.required
            )

        raise ProtocolOrder(f"frame kind {kind} is not a request")


# ---- TCP plumbing ----


def _read_exact(rfile, n: int) -> bytes | None:
    data = rfile.read(n)
    if data is None or len(data) < n:
        return None
    return data


def read_frame(rfile) -> tuple[int, bytes] | None:
    """Read one frame from a stream; None on clean EOF."""

    header = _read_exact(rfile, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME:
        raise Oversized(f"declared length {length} exceeds the cap")
    if length < 1:
        raise Truncated("declared length leaves no room for the kind byte")
    rest = _read_exact(rfile, length)
    if rest is None:
        raise Truncated("connection closed mid-frame")
    kind = rest[0]
    if kind not in Kind._value2member_map_:
        raise UnknownKind(f"frame kind {kind} is not part of the protocol")
    return kind, rest[1:]


class _ConnectionHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        service: BackendService = self.server.service
        while True:
            try:
                frame = read_frame(self.rfile)
            except FrameError as exc:
                try:
                    self.wfile.write(
                        encode_frame(Kind.ERROR, error_body(ErrorCode.MALFORMED, str(exc)))
                    )
                except OSError:
                    pass
                return
            except OSError:
                return
            if frame is None:
                return
            kind, body = frame
            reply_kind, reply_body = service.handle_message(kind, body)
            try:
                self.wfile.write(encode_frame(reply_kind, reply_body))
            except OSError:
                return


class BackendServer(socketserver.ThreadingTCPServer):
    """TCP front for one BackendService; one logical session per connection."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], service: BackendService):
        super().__init__(address, _ConnectionHandler)
        self.service = service

    def serve_in_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


class BackendClient:
    """Blocking request/reply client for the framed protocol."""

    def __init__(self, address: tuple[str, int], timeout: float = 10.0):
        self._sock = socket.create_connection(address, timeout=timeout)
        self._rfile = self._sock.makefile("rb")

    def close(self) -> None:
        try:
            self._rfile.close()
        finally:
            self._sock.close()

    def __enter__(self) -> "BackendClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def roundtrip(self, kind: int, body: bytes) -> tuple[int, bytes]:
        self._sock.sendall(encode_frame(kind, body))
        frame = read_frame(self._rfile)
        if frame is None:
            raise ConnectionError("server closed the connection")
        return frame

    def _expect_reply(self, kind: int, body: bytes) -> bytes:
        reply_kind, reply_body = self.roundtrip(kind, body)
        if reply_kind == Kind.ERROR:
            code, message = parse_error(reply_body)
            raise RuntimeError(f"server error {code.name}: {message}")
        return reply_body

    def enroll_begin(self, device_id: int) -> None:
        self._expect_reply(Kind.ENROLL_BEGIN, enroll_begin_body(device_id))

    def enroll_data(
        self, device_id: int, feature: Feature, pairs: list[TrainingPair],
        chunk: int = 400,
    ) -> None:
        for start in range(0, len(pairs), chunk):
            body = enroll_data_body(device_id, feature, pairs[start:start + chunk])
            self._expect_reply(Kind.ENROLL_DATA, body)

    def enroll_commit(self, device_id: int) -> None:
        self._expect_reply(Kind.ENROLL_COMMIT, enroll_commit_body(device_id))

    def enroll(self, device_id: int, pairs_by_feature: dict[Feature, list[TrainingPair]]) -> None:
        self.enroll_begin(device_id)
        for feature, pairs in pairs_by_feature.items():
            self.enroll_data(device_id, feature, pairs)
        self.enroll_commit(device_id)

    def authenticate(self, device_id: int, request: Request, token: Token) -> WireAuthResult:
        body = auth_request_body(device_id, request, token)
        return parse_auth_reply(self._expect_reply(Kind.AUTH_REQUEST, body))
