from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass, field

from .tensor import Tape

ENCODER_REGION_PREFIXES = ("patch-embed", "encoder-block-", "neck")


def is_encoder_region(tag: str) -> bool:
    return tag.startswith(ENCODER_REGION_PREFIXES)


@dataclass(frozen=True)
class LedgerEntry:
    index: int
    op: str
    region: str
    retained_bytes: int


@dataclass
class ActivationLedger:
    """Bytes each recorded op keeps alive until backward, grouped by model region."""

    entries: list[LedgerEntry] = field(default_factory=lambda: [])

    @property
    def total_retained_bytes(self) -> int:
        return sum(e.retained_bytes for e in self.entries)

    @property
    def by_region(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.region] = out.get(e.region, 0) + e.retained_bytes
        return out

    def bytes_for(self, regions: Iterable[str]) -> int:
        wanted = set(regions)
        return sum(e.retained_bytes for e in self.entries if e.region in wanted)

    @property
    def encoder_bytes(self) -> int:
        return sum(e.retained_bytes for e in self.entries if is_encoder_region(e.region))

    def to_dict(self) -> dict[str, object]:
        return {
            "total_retained_bytes": self.total_retained_bytes,
            "encoder_retained_bytes": self.encoder_bytes,
            "by_region": dict(sorted(self.by_region.items())),
            "n_records": len(self.entries),
        }


def ledger_report(tape: Tape) -> ActivationLedger:
    """
    Build the ledger for a tape.

    Frozen parts of the model never reach the tape (no trainable input means no
    record), so the trainability in force during the forward pass is already
    reflected in which records exist.
    """
    return ActivationLedger(
        [LedgerEntry(r.index, r.op, r.region, r.retained_bytes) for r in tape.records]
    )
