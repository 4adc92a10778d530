"""The fixed SRL process alphabet shared by every downstream model."""

from enum import Enum


class ProcessLabel(str, Enum):
    ORIENTATION = "MC.Orientation"
    PLANNING = "MC.Planning"
    MONITORING = "MC.Monitoring"
    EVALUATION = "MC.Evaluation"
    FIRST_READING = "LC.FirstReading"
    REREADING = "LC.Rereading"
    ELABORATION = "HC.ElaborationOrganisation"
    NO_PROCESS = "No_Process"

    def __str__(self) -> str:
        return self.value


NO_PROCESS = ProcessLabel.NO_PROCESS.value

# Order fixes the row/column layout of every transition matrix.
PROCESS_ALPHABET: tuple[str, ...] = tuple(
    lab.value for lab in ProcessLabel if lab is not ProcessLabel.NO_PROCESS
)
LABEL_INDEX = {lab: i for i, lab in enumerate(PROCESS_ALPHABET)}

SHORT_NAMES = {
    "MC.Orientation": "O",
    "MC.Planning": "P",
    "MC.Monitoring": "M",
    "MC.Evaluation": "E",
    "LC.FirstReading": "F",
    "LC.Rereading": "R",
    "HC.ElaborationOrganisation": "HC",
}


def parse_label(value: str) -> str:
    """Accept a full label value or its short name."""
    if value in LABEL_INDEX or value == NO_PROCESS:
        return value
    for full, short in SHORT_NAMES.items():
        if value == short:
            return full
    raise ValueError(f"unknown process label {value!r}")
