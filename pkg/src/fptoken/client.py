"""Device-side token construction: fingerprints, poisoning, wire format.

A token answers one authenticated request.  The client maps the request to
its task list, measures every task, keeps a random subset of the raw
fingerprints and poisons the rest.  Which entries are raw is never
serialized; the backend simply counts how many entries verify.

Wire format (integers big-endian, value payloads little-endian):

    nonce   u32
    count   u8
    entry*  task_index u8, tag u8, payload
            tag 0 = analog, payload f64 LE
            tag 1 = 32-bit word, payload u32 LE
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .mapping import MappingConfig, Request, map_message
from .hwsim import Analog, Bits32, DeviceProfile, FingerprintValue, execute_task

_MASK32 = 0xFFFFFFFF

TAG_ANALOG = 0
TAG_BITS32 = 1


class NonceRegression(ValueError):
    """Request nonce does not exceed the last nonce this client issued."""


class MalformedToken(ValueError):
    """Token bytes violate the wire format."""


@dataclass(frozen=True)
class AuthConfig:
    """Shared authentication parameters.

    total_num tasks are mapped per request; used_num of them stay raw in the
    token; the backend accepts when at least accept_num entries verify.
    Poison noise is drawn uniformly from [noise_lo, noise_hi] and the
    additive constant c shifts even zero-valued fingerprints.
    """

    total_num: int = 10
    used_num: int = 5
    accept_num: int = 3
    noise_lo: float = 0.08
    noise_hi: float = 0.2
    c: float = 1.0

    def __post_init__(self) -> None:
        if not 1 <= self.accept_num <= self.used_num <= self.total_num:
            raise ValueError("need 1 <= accept_num <= used_num <= total_num")
        if self.total_num > 255:
            raise ValueError("total_num must fit in one byte")
        if not 0.0 < self.noise_lo <= self.noise_hi:
            raise ValueError("need 0 < noise_lo <= noise_hi")


@dataclass(frozen=True)
class TokenEntry:
    task_index: int
    value: FingerprintValue


@dataclass(frozen=True)
class Token:
    nonce: int
    entries: tuple[TokenEntry, ...]


def poison_value(fp: FingerprintValue, noise: float, c: float) -> FingerprintValue:
    """fp * (1 + noise) + c; words round half-up and wrap at 32 bits."""

    if isinstance(fp, Analog):
        return Analog(fp.value * (1.0 + noise) + c)
    scaled = fp.word * (1.0 + noise) + c
    return Bits32(int(math.floor(scaled + 0.5)) & _MASK32)


def choose_poison_mask(total_num: int, used_num: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask with exactly used_num True entries (True = keep raw).

    used_num 0 is allowed here (fully poisoned tokens exist only in attack
    experiments; AuthConfig itself requires used_num >= 1).
    """

    if not 0 <= used_num <= total_num:
        raise ValueError("need 0 <= used_num <= total_num")
    mask = np.zeros(total_num, dtype=bool)
    keep = rng.choice(total_num, size=used_num, replace=False)
    mask[keep] = True
    return mask


def generate_token_with_mask(
    profile: DeviceProfile,
    request: Request,
    mask: np.ndarray,
    cfg: AuthConfig,
    mapping_cfg: MappingConfig,
    rng: np.random.Generator,
) -> Token:
    """Build a token with an explicit poison mask (True = keep raw).

    The regular client path draws the mask itself; experiments pass fixed or
    degenerate masks (e.g. all False) through here.
    """

    tasks = map_message(request, mapping_cfg)
    if len(mask) != len(tasks):
        raise ValueError("mask length must equal total_num")
    entries = []
    for i, task in enumerate(tasks):
        fp = execute_task(profile, task, rng)
        if not mask[i]:
            noise = float(rng.uniform(cfg.noise_lo, cfg.noise_hi))
            fp = poison_value(fp, noise, cfg.c)
        entries.append(TokenEntry(task_index=i, value=fp))
    return Token(nonce=request.nonce, entries=tuple(entries))


class TokenClient:
    """Stateful client for one device; enforces nonce monotonicity."""

    def __init__(
        self,
        profile: DeviceProfile,
        cfg: AuthConfig,
        mapping_cfg: MappingConfig,
        rng: np.random.Generator,
    ):
        self.profile = profile
        self.cfg = cfg
        self.mapping_cfg = mapping_cfg
        self.rng = rng
        self.last_nonce: int | None = None

    def generate_token(self, request: Request) -> Token:
        if self.last_nonce is not None and request.nonce <= self.last_nonce:
            raise NonceRegression(
                f"nonce {request.nonce} does not exceed last issued {self.last_nonce}"
            )
        if self.cfg.total_num != self.mapping_cfg.total_num:
            raise ValueError("auth and mapping configs disagree on total_num")
        mask = choose_poison_mask(self.cfg.total_num, self.cfg.used_num, self.rng)
        token = generate_token_with_mask(
            self.profile, request, mask, self.cfg, self.mapping_cfg, self.rng
        )
        self.last_nonce = request.nonce
        return token


def encode_token(token: Token) -> bytes:
    if not 0 <= token.nonce <= _MASK32:
        raise ValueError("nonce must fit in 32 bits")
    if len(token.entries) > 255:
        raise ValueError("too many entries")
    out = [struct.pack(">IB", token.nonce, len(token.entries))]
    for entry in token.entries:
        if not 0 <= entry.task_index <= 255:
            raise ValueError("task_index must fit in one byte")
        if isinstance(entry.value, Analog):
            out.append(struct.pack(">BB", entry.task_index, TAG_ANALOG))
            out.append(struct.pack("<d", entry.value.value))
        else:
            out.append(struct.pack(">BB", entry.task_index, TAG_BITS32))
            out.append(struct.pack("<I", entry.value.word))
    return b"".join(out)


def decode_token(data: bytes) -> Token:
    """Parse and validate token bytes; anything off-format raises."""

    if len(data) < 5:
        raise MalformedToken("token shorter than its fixed header")
    nonce, count = struct.unpack_from(">IB", data, 0)
    pos = 5
    entries = []
    for _ in range(count):
        if pos + 2 > len(data):
            raise MalformedToken("truncated entry header")
        task_index, tag = struct.unpack_from(">BB", data, pos)
        pos += 2
        if tag == TAG_ANALOG:
            if pos + 8 > len(data):
                raise MalformedToken("truncated analog payload")
            (value,) = struct.unpack_from("<d", data, pos)
            pos += 8
            if not math.isfinite(value):
                raise MalformedToken("analog value must be finite")
            entries.append(TokenEntry(task_index, Analog(value)))
        elif tag == TAG_BITS32:
            if pos + 4 > len(data):
                raise MalformedToken("truncated word payload")
            (word,) = struct.unpack_from("<I", data, pos)
            pos += 4
            entries.append(TokenEntry(task_index, Bits32(word)))
        else:
            raise MalformedToken(f"unknown entry tag {tag}")
    if pos != len(data):
        raise MalformedToken("trailing bytes after last entry")
    return Token(nonce=nonce, entries=tuple(entries))
