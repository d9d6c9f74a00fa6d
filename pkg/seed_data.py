#!/usr/bin/env python3
"""
Seed the SIDS case-study datasets and write ready-to-run configs
"""
import json
import math
import sys
from pathlib import Path

ROOT_DIR = Path(__file__).parent

# maternal recall of antibiotic use (X) by SIDS case status (Y)
RECALL_COUNTS = {"Y1X1": 173, "Y1X0": 602, "Y0X1": 134, "Y0X0": 663}

LOGIT_01 = math.log(0.1 / 0.9)
LN_13_5 = math.log(13.5)

# Normal priors (mean, variance) for the T|XY regression
MISCLASSIFICATION_PRIORS = {
    "beta_T": (LOGIT_01, 0.16),
    "beta_TX": (LN_13_5, 0.25),
    "beta_TY": (0.0, 0.50),
    "beta_TXY": (0.0, 0.125),
}

# validation data: medical-record prescription W, keyed by (x, y)
VALIDATED_W1 = {(1, 1): 29, (0, 1): 17, (1, 0): 21, (0, 0): 16}
VALIDATED_W0 = {(1, 1): 22, (0, 1): 143, (1, 0): 12, (0, 0): 168}
UNVALIDATED = {(1, 1): 122, (0, 1): 442, (1, 0): 101, (0, 0): 479}

# X=1 validated records reused as a selected-stratum TY table, keyed by (t, y)
SELECTION_STRATUM = {(1, 1): 29, (0, 1): 22, (1, 0): 21, (0, 0): 12}


def recall_cells():
    return [
        {"index": {"X": int(key[3]), "Y": int(key[1])}, "count": count}
        for key, count in RECALL_COUNTS.items()
    ]


def validation_cells():
    cells = []
    for w, counts in ((1, VALIDATED_W1), (0, VALIDATED_W0)):
        for (x, y), count in counts.items():
            cells.append({"index": {"W": w, "X": x, "Y": y}, "count": count})
    for (x, y), count in UNVALIDATED.items():
        cells.append({"index": {"X": x, "Y": y}, "count": count})
    return cells


def selection_cells():
    return [{"index": {"T": t, "Y": y}, "count": count} for (t, y), count in SELECTION_STRATUM.items()]


def misclassification_priors():
    return {
        name: {"dist": "normal", "mean": mean, "variance": var}
        for name, (mean, var) in MISCLASSIFICATION_PRIORS.items()
    }


def build_configs():
    crude_prior = {"dist": "normal", "mean": 0.0, "variance": 0.5}
    sampling = {"draws": 250000, "seed": 20090101, "identified_mode": "dirichlet", "dirichlet_prior": 1.0}
    sensitivity_priors = misclassification_priors()
    sensitivity_priors["beta_TY"] = {"dist": "normal", "limits": [0.125, 8.0]}
    confounder_priors = {
        "beta_T": {"dist": "normal", "mean": math.log(0.25 / 0.75), "variance": 0.25},
        "beta_TX": {"dist": "normal", "mean": math.log(2.0), "variance": 0.25},
        "beta_TY": {"dist": "normal", "mean": math.log(2.0), "variance": 0.25},
    }
    return {
        "sids_conventional": {"analysis": "conventional", "table": recall_cells(), "crude_prior": crude_prior},
        "sids_misclassification": {
            "analysis": "misclassification",
            "table": recall_cells(),
            "priors": misclassification_priors(),
            "crude_prior": crude_prior,
            "sampling": sampling,
        },
        "sids_sensitivity": {
            "analysis": "misclassification",
            "table": recall_cells(),
            "priors": sensitivity_priors,
            "sampling": sampling,
        },
        "sids_validation": {"analysis": "validation", "table": validation_cells(), "priors": misclassification_priors()},
        "sids_confounder": {
            "analysis": "confounder",
            "table": recall_cells(),
            "priors": confounder_priors,
            "sampling": {**sampling, "identified_mode": "bootstrap"},
        },
        "sids_selection": {
            "analysis": "selection",
            "selection_mode": "density",
            "table": selection_cells(),
            "priors": {"beta_STY": {"dist": "normal", "mean": 0.0, "variance": 0.5}},
            "sampling": sampling,
        },
        "sids_prior_check": {"analysis": "prior-check", "priors": misclassification_priors()},
    }


def write_configs(target_dir: Path = ROOT_DIR / "configs"):
    target_dir.mkdir(parents=True, exist_ok=True)
    for name, config in build_configs().items():
        path = target_dir / f"{name}.json"
        path.write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
        print(f"   wrote {path}")


if __name__ == "__main__":
    print("🌱 Writing SIDS configs...")
    write_configs(Path(sys.argv[1]) if len(sys.argv) > 1 else ROOT_DIR / "configs")
    print("✅ Done")
