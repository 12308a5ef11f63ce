"""Symbolic task vocabulary: correspondences between anchor and function parts."""

from __future__ import annotations

from dataclasses import dataclass

RELATIONS = ("align", "tilt", "facing-up", "contain", "touch", "place")


@dataclass(frozen=True)
class CorrespondenceSpec:
    relation: str
    anchor_part: str
    function_part: str

    def __post_init__(self):
        if self.relation not in RELATIONS and self.relation != "whole":
            raise ValueError(f"unknown relation {self.relation!r}; valid: {', '.join(RELATIONS)}")

    def __str__(self):
        return f"<{self.relation}, {self.anchor_part}, {self.function_part}>"


@dataclass(frozen=True)
class TaskDefinition:
    name: str
    correspondences: tuple

    def __post_init__(self):
        if not self.correspondences:
            raise ValueError("a task needs at least one correspondence")
        object.__setattr__(self, "correspondences", tuple(self.correspondences))

    @property
    def relations(self) -> tuple:
        return tuple(c.relation for c in self.correspondences)

    def correspondence(self, relation: str) -> CorrespondenceSpec:
        for c in self.correspondences:
            if c.relation == relation:
                return c
        raise KeyError(f"task {self.name} has no {relation!r} correspondence")

    def only(self, relation: str) -> "TaskDefinition":
        """Single-correspondence sub-task (individual primitive)."""
        return TaskDefinition(self.name, (self.correspondence(relation),))


POUR = TaskDefinition(
    "pour",
    (
        CorrespondenceSpec("align", "rim", "rim"),
        CorrespondenceSpec("tilt", "body", "body"),
        CorrespondenceSpec("facing-up", "body", "handle"),
    ),
)

PLACE = TaskDefinition(
    "place",
    (
        CorrespondenceSpec("contain", "body", "head"),
        CorrespondenceSpec("touch", "bottom", "tip"),
        CorrespondenceSpec("place", "body", "body"),
    ),
)

TASKS = {"pour": POUR, "place": PLACE}

# Whole-object pseudo-correspondence used by the monolithic baseline.
WHOLE = CorrespondenceSpec("whole", "object", "object")


def get_task(name: str) -> TaskDefinition:
    try:
        return TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; valid: {', '.join(TASKS)}") from None
