"""Deterministic message-to-task mapping.

Both sides of the protocol derive, from an authentication request alone, the
ordered list of hardware measurement tasks whose results the token must
carry.  The chain is built from a 32-bit non-cryptographic hash (`ap_hash`)
so it runs comfortably on small microcontrollers, and it binds every task to
the operation, the nonce, and every payload, in both payload orders, so that
tampering with any part of the request scrambles the task list.

Round structure, for round ``i`` in ``0 .. total_num-1`` with running
``digest`` starting at 0:

    op_digest  = ap_hash(operation_utf8 || nonce_be4 || digest_be4)
    fwd_digest = ap_hash(nonce_be4 || payloads[i mod P])
    bwd_digest = ap_hash(nonce_be4 || payloads[(P-1-i) mod P])
    digest     = ap_hash(op_digest_be4 || fwd_digest_be4 || bwd_digest_be4)
    task_i     = divide_arguments(digest, config)

Ablation variants keep the same round inputs but collapse the final
combination step; they exist so the security experiments can show what each
ingredient buys.

All multi-byte integers inside the hash inputs are 4-byte big-endian.  The
byte layout is normative: golden vectors under ``tests/vectors`` pin it.

Concurrency: everything here is pure; share freely across threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

_MASK32 = 0xFFFFFFFF

# Upper bounds enforced on requests; the wire format (see service) relies on
# them fitting in single-byte length fields.
MAX_OPERATION_BYTES = 64
MAX_PAYLOADS = 16
MAX_PAYLOAD_BYTES = 256


class EmptyPayloads(ValueError):
    """A request carried no payloads; the mapping needs at least one."""


class Feature(enum.Enum):
    """Hardware feature a task targets. One TaskSpec exists per feature."""

    DAC_ADC = "dac_adc"
    FPU = "fpu"
    PWM = "pwm"
    RTC_FRE = "rtc_fre"
    RTC_PHA = "rtc_pha"
    SRAM = "sram"


class MappingVariant(enum.Enum):
    """How each round combines its three digests into the running digest.

    FULL is the deployed construction.  The other three are deliberately
    weakened ablations used by the tamper experiments.
    """

    FULL = "full"
    # digest <- op_digest: payloads never influence the tasks.
    OP_CHAIN_ONLY = "op-chain-only"
    # digest <- bwd_digest: only the backward payload walk is bound.
    BWD_PAYLOAD_ONLY = "bwd-payload-only"
    # digest <- H(op_digest || fwd_digest): backward walk dropped.
    NO_BWD_PAYLOAD = "no-bwd-payload"


# Argument arity is fixed per feature; radices may shrink for experiments
# but the argument count is part of the feature's call signature.
FEATURE_ARG_COUNTS: dict[Feature, int] = {
    Feature.DAC_ADC: 4,
    Feature.FPU: 3,
    Feature.PWM: 5,
    Feature.RTC_FRE: 4,
    Feature.RTC_PHA: 3,
    Feature.SRAM: 1,
}


@dataclass(frozen=True)
class TaskSpec:
    """Argument shape for one feature's tasks.

    arg_radices[k] is the number of admissible values for argument k, so the
    task space contributed by this spec is the product of the radices.
    """

    feature: Feature
    arg_radices: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.arg_radices) != FEATURE_ARG_COUNTS[self.feature]:
            raise ValueError(
                f"{self.feature.value} takes {FEATURE_ARG_COUNTS[self.feature]} "
                f"arguments, got {len(self.arg_radices)} radices"
            )
        if any(r < 1 for r in self.arg_radices):
            raise ValueError("arg radices must be >= 1")
        size = 1
        for r in self.arg_radices:
            size *= r
        if size < 2:
            raise ValueError("task spec must admit at least 2 distinct tasks")

    @property
    def size(self) -> int:
        size = 1
        for r in self.arg_radices:
            size *= r
        return size


@dataclass(frozen=True)
class HardwareTask:
    """One concrete measurement order: a feature plus its argument vector."""

    feature: Feature
    args: tuple[int, ...]


@dataclass(frozen=True)
class Request:
    """Authentication request as seen by the mapping.

    operation is an application verb ("UNLOCK", "READ_TEMP", ...); payloads
    are the opaque argument blobs of that operation; nonce is the client's
    strictly increasing counter.
    """

    operation: str
    nonce: int
    payloads: tuple[bytes, ...]

    def __post_init__(self) -> None:
        op = self.operation.encode("utf-8")
        if not 1 <= len(op) <= MAX_OPERATION_BYTES:
            raise ValueError("operation must encode to 1..64 UTF-8 bytes")
        if not 0 <= self.nonce <= _MASK32:
            raise ValueError("nonce must fit in 32 bits")
        if len(self.payloads) == 0:
            raise EmptyPayloads("request carries no payloads")
        if len(self.payloads) > MAX_PAYLOADS:
            raise ValueError("too many payloads")
        if any(len(p) > MAX_PAYLOAD_BYTES for p in self.payloads):
            raise ValueError("payload exceeds 256 bytes")


@dataclass(frozen=True)
class MappingConfig:
    """Task-mapping parameters shared by client and backend.

    enabled_specs order matters: the feature-selector field of the digest
    decomposition indexes into it.
    """

    enabled_specs: tuple[TaskSpec, ...]
    total_num: int = 10
    variant: MappingVariant = MappingVariant.FULL

    def __post_init__(self) -> None:
        if not self.enabled_specs:
            raise ValueError("at least one task spec must be enabled")
        if not 1 <= self.total_num <= 255:
            raise ValueError("total_num must be in 1..255")
        feats = [s.feature for s in self.enabled_specs]
        if len(set(feats)) != len(feats):
            raise ValueError("duplicate feature in enabled_specs")


def ap_hash(data: bytes) -> int:
    """32-bit AP hash over raw bytes.

    State starts at 0xAAAAAAAA.  Byte i (0-based) updates the state with
    ``state ^= (state << 7) ^ (byte * (state >> 3))`` when i is even and
    ``state ^= ~((state << 11) + (byte ^ (state >> 5)))`` when i is odd,
    all modulo 2**32.  Bit-exact with the published reference; golden
    vectors in the tests pin the values.
    """

    h = 0xAAAAAAAA
    for i, b in enumerate(data):
        if i & 1 == 0:
            h ^= ((h << 7) ^ (b * (h >> 3))) & _MASK32
        else:
            h ^= (~((h << 11) + (b ^ (h >> 5)))) & _MASK32
    return h


def _be4(value: int) -> bytes:
    return value.to_bytes(4, "big")


def divide_arguments(digest: int, config: MappingConfig) -> HardwareTask:
    """Decompose a 32-bit digest into one task via mixed-radix extraction.

    The quotient starts at the digest itself.  The first field selects the
    TaskSpec (``digest mod |enabled_specs|``; with a single spec the field
    degenerates to 0 and consumes nothing).  Each following argument field k
    takes ``quotient mod arg_radices[k]`` and divides the quotient down.

    A 32-bit digest can run out of entropy mid-extraction.  Before every
    argument field after the first, while the quotient is smaller than that
    field's radix, it is widened by counter hashing:

        quotient <- quotient * 2**32 + ap_hash(digest_be4 || k_be4)

    with k counting 0, 1, ... per decomposition.  Widening preserves the
    remaining quotient in the high bits, so low digests decompose to zero
    fields until the extension kicks in.  The exact schedule is normative
    (golden vectors pin it).
    """

    if not 0 <= digest <= _MASK32:
        raise ValueError("digest must fit in 32 bits")
    specs = config.enabled_specs
    q = digest % (1 << 32) if digest >= 0 else 0
    feature_idx = q % len(specs)
    q //= len(specs)
    spec = specs[feature_idx]

    args: list[int] = []
    ext_counter = 0
    for k, radix in enumerate(spec.arg_radices):
        if k > 0:
            while q < radix:
                ext = ap_hash(_be4(digest) + _be4(ext_counter))
                ext_counter += 1
                q = (q << 32) + ext
        args.append(q % radix)
        q //= radix
    return HardwareTask(feature=spec.feature, args=tuple(args))


def task_space_size(config: MappingConfig) -> int:
    """Total number of distinct tasks the config can emit (glossary: d)."""

    return sum(spec.size for spec in config.enabled_specs)


def _round_digests(request: Request, config: MappingConfig) -> list[int]:
    """Running digest after each round. Internal; tests use it to check
    which rounds a given payload influences."""

    op = request.operation.encode("utf-8")
    nonce = _be4(request.nonce)
    payloads = request.payloads
    count = len(payloads)
    variant = config.variant

    digests: list[int] = []
    digest = 0
    for i in range(config.total_num):
        op_digest = ap_hash(op + nonce + _be4(digest))
        fwd_digest = ap_hash(nonce + payloads[i % count])
        bwd_digest = ap_hash(nonce + payloads[(count - 1 - i) % count])
        if variant is MappingVariant.FULL:
            digest = ap_hash(_be4(op_digest) + _be4(fwd_digest) + _be4(bwd_digest))
        elif variant is MappingVariant.OP_CHAIN_ONLY:
            digest = op_digest
        elif variant is MappingVariant.BWD_PAYLOAD_ONLY:
            digest = bwd_digest
        else:  # NO_BWD_PAYLOAD
            digest = ap_hash(_be4(op_digest) + _be4(fwd_digest))
        digests.append(digest)
    return digests


def map_message(request: Request, config: MappingConfig) -> list[HardwareTask]:
    """Derive the ordered task list for a request.

    Pure function of (request, config): both endpoints call it and must get
    identical lists.  Changing the operation, the nonce, or any payload byte
    reshuffles the digests and therefore, with overwhelming probability,
    the tasks.
    """

    if len(request.payloads) == 0:
        raise EmptyPayloads("request carries no payloads")
    return [divide_arguments(d, config) for d in _round_digests(request, config)]
