"""Branch-local copy-on-write state with staged commit and squash.

Authoritative state is the single source of truth (agent memory artifacts,
a file view, and a session/environment registry). Speculative branches fork
it in O(1): a fork captures the current epoch and starts with empty write
overlays, so reads fall through to the base until a staged write shadows
them. The base is never written through; it changes only via authoritative
execution or a sandbox commit, and every such mutation bumps the epoch.

Staged (level-2) effects live in the overlays until commit. Warm-up
(level-0) effects live in the environment overlay and may be merged on
promotion without a full commit. Read-only (level-1) effects leave only a
history record. Squashing drops all overlays, leaving the base bitwise
unchanged.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import IntEnum

from .resources import ResourceProfile


class SafetyLevel(IntEnum):
    LEVEL0_PREP = 0
    LEVEL1_READONLY = 1
    LEVEL2_STAGED = 2
    NON_SPECULATIVE = 3


SAFETY_NAMES = {
    SafetyLevel.LEVEL0_PREP: "level0_prep",
    SafetyLevel.LEVEL1_READONLY: "level1_readonly",
    SafetyLevel.LEVEL2_STAGED: "level2_staged",
    SafetyLevel.NON_SPECULATIVE: "non_speculative",
}
SAFETY_BY_NAME = {v: k for k, v in SAFETY_NAMES.items()}

TARGET_MEMORY = "memory"
TARGET_FILES = "files"
TARGET_ENV = "env"
TARGETS = (TARGET_MEMORY, TARGET_FILES, TARGET_ENV)

OP_SET = "set"
OP_DEL = "del"

ACTIVE = "active"
PREEMPTED = "preempted"
COMMITTED = "committed"
SQUASHED = "squashed"

# Overlay tombstone for staged deletions.
_TOMBSTONE = "\x00deleted\x00"


class SandboxStateError(RuntimeError):
    """Operation on a sandbox in a terminal or otherwise wrong status."""


class DivergenceError(RuntimeError):
    """Base state changed since fork; staged work must be squashed."""


class ProtocolError(RuntimeError):
    """Commit attempted without promotion, or repeated terminal transition."""


class EffectRejected(RuntimeError):
    """A non-speculative effect reached a sandbox (scheduler bug upstream)."""


@dataclass(frozen=True)
class Effect:
    target: str
    op: str
    key: str
    payload: str = ""


@dataclass
class AuthoritativeState:
    """Live agent-visible state; every mutation bumps ``epoch``."""

    memory: dict[str, str] = field(default_factory=dict)
    files: dict[str, str] = field(default_factory=dict)
    env: dict[str, str] = field(default_factory=dict)
    epoch: int = 0

    def _store(self, target: str) -> dict[str, str]:
        return {TARGET_MEMORY: self.memory, TARGET_FILES: self.files, TARGET_ENV: self.env}[
            target
        ]

    def apply(self, effect: Effect) -> None:
        store = self._store(effect.target)
        if effect.op == OP_SET:
            store[effect.key] = effect.payload
        elif effect.op == OP_DEL:
            store.pop(effect.key, None)
        else:
            raise ValueError(f"unknown effect op: {effect.op!r}")
        self.epoch += 1

    def read(self, target: str, key: str) -> str | None:
        return self._store(target).get(key)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in TARGETS:
            store = self._store(name)
            for key in sorted(store):
                h.update(f"{name}\x1f{key}\x1f{store[key]}\x1e".encode())
        return h.hexdigest()


@dataclass
class SandboxState:
    """One branch's isolated view over an AuthoritativeState."""

    base: AuthoritativeState
    base_epoch: int
    overlays: dict[str, dict[str, str]]
    history: list[tuple[Effect, SafetyLevel]]
    status: str = ACTIVE
    promoted: bool = False
    reserved: ResourceProfile = field(default_factory=ResourceProfile.zero)

    def is_stale(self) -> bool:
        return self.base.epoch != self.base_epoch

    def read(self, target: str, key: str) -> str | None:
        overlay = self.overlays[target]
        if key in overlay:
            value = overlay[key]
            return None if value == _TOMBSTONE else value
        return self.base.read(target, key)

    def overlay_size(self) -> int:
        return sum(len(o) for o in self.overlays.values())


def fork(base: AuthoritativeState) -> SandboxState:
    """O(1) fork: no copy of the base, just an epoch capture."""
    return SandboxState(
        base=base,
        base_epoch=base.epoch,
        overlays={t: {} for t in TARGETS},
        history=[],
    )


def apply_effect(s: SandboxState, effect: Effect, level: SafetyLevel) -> None:
    """Record a branch-local effect at the given safety level.

    Level 0 touches only the environment overlay (session/warm-up registry),
    level 1 is history-only, level 2 stages into the overlays. The
    authoritative base is never touched here.
    """
    if s.status not in (ACTIVE, PREEMPTED):
        raise SandboxStateError(f"effect on {s.status} sandbox")
    if level == SafetyLevel.NON_SPECULATIVE:
        raise EffectRejected(f"non-speculative effect reached sandbox: {effect}")
    if effect.target not in TARGETS:
        raise ValueError(f"unknown effect target: {effect.target!r}")
    if level == SafetyLevel.LEVEL0_PREP and effect.target != TARGET_ENV:
        raise ValueError("level-0 effects are restricted to the env registry")

    if level in (SafetyLevel.LEVEL0_PREP, SafetyLevel.LEVEL2_STAGED):
        overlay = s.overlays[effect.target]
        if effect.op == OP_SET:
            overlay[effect.key] = effect.payload
        elif effect.op == OP_DEL:
            overlay[effect.key] = _TOMBSTONE
        else:
            raise ValueError(f"unknown effect op: {effect.op!r}")
    s.history.append((effect, level))


def has_staged_writes(s: SandboxState) -> bool:
    return any(level == SafetyLevel.LEVEL2_STAGED for _, level in s.history)


def commit(s: SandboxState, base: AuthoritativeState) -> None:
    """Merge staged overlays into the base, in history order.

    Requires promotion and an unchanged base epoch; the epoch is bumped
    exactly once regardless of how many effects merge.
    """
    if s.status in (COMMITTED, SQUASHED):
        raise ProtocolError(f"commit on {s.status} sandbox")
    if not s.promoted:
        raise ProtocolError("commit requires a promoted branch")
    if base is not s.base or base.epoch != s.base_epoch:
        raise DivergenceError(
            f"base diverged since fork (epoch {base.epoch} != {s.base_epoch})"
        )
    for effect, level in s.history:
        if level in (SafetyLevel.LEVEL0_PREP, SafetyLevel.LEVEL2_STAGED):
            store = base._store(effect.target)
            if effect.op == OP_SET:
                store[effect.key] = effect.payload
            else:
                store.pop(effect.key, None)
    base.epoch += 1
    s.status = COMMITTED


def merge_warmups(s: SandboxState, base: AuthoritativeState) -> int:
    """Promote level-0 session artifacts into the base env registry.

    Valid even without a staged commit; returns the number of entries
    merged. Counts as an authoritative mutation (epoch bump) when nonempty.
    """
    if s.status in (COMMITTED, SQUASHED):
        return 0
    merged = 0
    for effect, level in s.history:
        if level == SafetyLevel.LEVEL0_PREP and effect.op == OP_SET:
            base.env[effect.key] = effect.payload
            merged += 1
    if merged:
        base.epoch += 1
    return merged


def squash(s: SandboxState) -> ResourceProfile:
    """Drop all overlays; the base is untouched. Returns the resource
    reservation to credit back to slack."""
    if s.status in (COMMITTED, SQUASHED):
        raise SandboxStateError(f"squash on {s.status} sandbox")
    s.overlays = {t: {} for t in TARGETS}
    s.status = SQUASHED
    return s.reserved
