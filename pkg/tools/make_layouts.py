"""Regenerate the curated layout files under src/hetero_eeg/data/layouts.

Channel orders follow the public distributions of each dataset. Neighbour
lists come from the flattened 10-20 grid and are written out so they can be
hand-edited and versioned; the package never recomputes them.
"""

from pathlib import Path

from hetero_eeg.montage import DEFAULT_GLOBAL_PAIRS, layout_from_labels, save_layout

BCIC2A = [
    "Fz", "FC3", "FC1", "FCz", "FC2", "FC4", "C5", "C3", "C1", "Cz", "C2",
    "C4", "C6", "CP3", "CP1", "CPz", "CP2", "CP4", "P1", "Pz", "P2", "POz",
]

PHYSIONET_MI = [
    "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "C5", "C3", "C1", "Cz",
    "C2", "C4", "C6", "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "Fp1",
    "Fpz", "Fp2", "AF7", "AF3", "AFz", "AF4", "AF8", "F7", "F5", "F3", "F1",
    "Fz", "F2", "F4", "F6", "F8", "FT7", "FT8", "T7", "T8", "T9", "T10", "TP7",
    "TP8", "P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8", "PO7", "PO3",
    "POz", "PO4", "PO8", "O1", "Oz", "O2", "Iz",
]

OPENBMI = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "FC5", "FC1", "FC2", "FC6",
    "T7", "C3", "Cz", "C4", "T8", "TP9", "CP5", "CP1", "CP2", "CP6", "TP10",
    "P7", "P3", "Pz", "P4", "P8", "PO9", "O1", "Oz", "O2", "PO10", "FC3", "FC4",
    "C5", "C1", "C2", "C6", "CP3", "CPz", "CP4", "P1", "P2", "POz", "FT9",
    "FTT9h", "TTP7h", "TP7", "TPP9h", "FT10", "FTT10h", "TPP8h", "TP8",
    "TPP10h", "F9", "F10", "AF7", "AF3", "AF4", "AF8", "PO3", "PO4",
]


def main() -> None:
    out = Path(__file__).resolve().parents[1] / "src" / "hetero_eeg" / "data" / "layouts"
    out.mkdir(parents=True, exist_ok=True)
    for name, labels in [("bcic2a", BCIC2A), ("physionet_mi", PHYSIONET_MI), ("openbmi", OPENBMI)]:
        assert len(set(labels)) == len(labels)
        layout = layout_from_labels(name, labels)
        layout.global_pairs = list(DEFAULT_GLOBAL_PAIRS)
        save_layout(layout, out / f"{name}.json")
        print(name, layout.n_sensors, sum(len(n) for n in layout.neighbour_lists) // 2, "edges")


if __name__ == "__main__":
    main()
