"""Generate tests/vectors/frames.bin after checking hand-computed bytes."""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from fptoken.mapping import Feature, Request
from fptoken.hwsim import Analog, Bits32, TrainingPair
from fptoken.client import decode_token
from fptoken.backend import Decision
from fptoken import service as svc

ROOT = pathlib.Path(__file__).resolve().parents[1]
TOKEN_GOLDEN = (ROOT / "tests" / "vectors" / "token.bin").read_bytes()

# frame 1: EnrollBegin(7); hand layout: len=3, kind=0, device=0x0007
f1 = svc.encode_frame(svc.Kind.ENROLL_BEGIN, svc.enroll_begin_body(7))
assert f1 == bytes.fromhex("00000003000007"), f1.hex()

# frame 2: EnrollData(7, RTC_PHA, two pairs with both value tags)
pairs = [
    TrainingPair(Feature.RTC_PHA, (1, 2, 3), Analog(0.5)),
    TrainingPair(Feature.RTC_PHA, (0, 1, 0), Bits32(0xDEADBEEF)),
]
f2 = svc.encode_frame(svc.Kind.ENROLL_DATA, svc.enroll_data_body(7, Feature.RTC_PHA, pairs))
expect2 = bytes.fromhex(
    "00000022"            # length 34 = body 33 + kind
    "01"                  # kind EnrollData
    "000704" "0002"       # device 7, feature code 4, two pairs
    "03" "000100020003" "00" "000000000000e03f"  # (1,2,3) -> Analog(0.5) f64 LE
    "03" "000000010000" "01" "efbeadde"          # (0,1,0) -> Bits32 LE
)
assert f2 == expect2, f2.hex()

# frame 3: EnrollCommit(7)
f3 = svc.encode_frame(svc.Kind.ENROLL_COMMIT, svc.enroll_commit_body(7))
assert f3 == bytes.fromhex("00000003020007"), f3.hex()

# frame 4: AuthRequest(7) wrapping the frozen token golden
token = decode_token(TOKEN_GOLDEN)
request = Request(operation="UNLOCK", nonce=0x01020304, payloads=(b"\xaa\xbb",))
f4 = svc.encode_frame(svc.Kind.AUTH_REQUEST, svc.auth_request_body(7, request, token))
expect4 = (
    bytes.fromhex("00000032")                  # length 50 = body 49 + kind
    + bytes.fromhex("03")                      # kind AuthRequest
    + bytes.fromhex("0007" "06") + b"UNLOCK"
    + bytes.fromhex("01020304" "01" "0002" "aabb")
    + TOKEN_GOLDEN
)
assert f4 == expect4, f4.hex()

# frame 5: auth Reply accept 3/3
f5 = svc.encode_frame(svc.Kind.REPLY, svc.auth_reply_body(7, Decision.ACCEPT, 3, 3))
assert f5 == bytes.fromhex("00000006" "04" "0007000303"), f5.hex()

# frame 6: Error(ProtocolOrder)
msg = "enroll-data before enroll-begin"
f6 = svc.encode_frame(svc.Kind.ERROR, svc.error_body(svc.ErrorCode.PROTOCOL_ORDER, msg))
expect6 = bytes.fromhex("00000023" "05" "01" "001f") + msg.encode()
assert f6 == expect6, f6.hex()

blob = f1 + f2 + f3 + f4 + f5 + f6
out = ROOT / "tests" / "vectors" / "frames.bin"
out.write_bytes(blob)
print(f"wrote {out} ({len(blob)} bytes)")
print(blob.hex())
