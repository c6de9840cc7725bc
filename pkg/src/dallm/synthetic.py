"""Synthetic patient cohorts standing in for the restricted clinical data.

Vitals and report wording depend weakly on the lesion labels so that the
evaluation harness has real (if modest) signal to find.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .core import (
    LESIONS,
    Dataset,
    DatasetMetadata,
    FeatureDescriptor,
    FeatureKind,
    Gender,
    Lesion,
    PatientCase,
    Provenance,
    make_dataset,
    merge_augmented,
)

PREVALENCE = {
    Lesion.ATELECTASIS: 0.30,
    Lesion.CONSOLIDATION: 0.20,
    Lesion.ENLARGED_CARDIAC_SILHOUETTE: 0.25,
    Lesion.PLEURAL_EFFUSION: 0.25,
    Lesion.PLEURAL_ABNORMALITY: 0.15,
}

FINDINGS = {
    Lesion.ATELECTASIS: ["Linear opacity at the left base consistent with subsegmental atelectasis.",
                         "Bibasilar atelectasis with mild volume loss."],
    Lesion.CONSOLIDATION: ["Focal airspace consolidation in the right lower lobe.",
                           "Patchy consolidation concerning for pneumonia."],
    Lesion.ENLARGED_CARDIAC_SILHOUETTE: ["The cardiac silhouette is enlarged.",
                                         "Cardiomegaly with prominent pulmonary vasculature."],
    Lesion.PLEURAL_EFFUSION: ["Small left pleural effusion with blunting of the costophrenic angle.",
                              "Moderate right pleural effusion."],
    Lesion.PLEURAL_ABNORMALITY: ["Pleural thickening along the lateral chest wall.",
                                 "Irregular pleural contour suggesting pleural plaque."],
}

HISTORY = {
    Lesion.ATELECTASIS: ["Recent abdominal surgery.", "Shallow breathing and reduced mobility."],
    Lesion.CONSOLIDATION: ["Productive cough and fever.", "Chills and pleuritic chest pain."],
    Lesion.ENLARGED_CARDIAC_SILHOUETTE: ["Known heart failure with leg edema.", "Hypertension and orthopnea."],
    Lesion.PLEURAL_EFFUSION: ["Progressive dyspnea on exertion.", "Shortness of breath lying flat."],
    Lesion.PLEURAL_ABNORMALITY: ["Remote asbestos exposure.", "Prior chest trauma."],
}

NORMAL_LINES = [
    "Lungs are otherwise clear.",
    "No pneumothorax.",
    "Osseous structures are unremarkable.",
    "Mediastinal contours are within normal limits.",
]


def synthetic_cases(n: int, seed: int = 0, id_prefix: str = "p", missing_rate: float = 0.0) -> list[PatientCase]:
    """Draw ``n`` reproducible cases; ``missing_rate`` blanks random vitals."""
    rng = np.random.default_rng(seed)
    width = len(str(max(n - 1, 1)))
    cases = []
    for i in range(n):
        labels = {l: bool(rng.random() < PREVALENCE[l]) for l in LESIONS}
        cons, ecs = labels[Lesion.CONSOLIDATION], labels[Lesion.ENLARGED_CARDIAC_SILHOUETTE]
        eff, atel = labels[Lesion.PLEURAL_EFFUSION], labels[Lesion.ATELECTASIS]
        age = int(np.clip(rng.normal(62 + 8 * ecs, 15), 18, 99))
        temperature = round(float(rng.normal(98.4 + 1.3 * cons, 0.9)), 1)
        heartrate = float(round(rng.normal(84 + 9 * eff + 6 * cons, 14)))
        resprate = float(round(np.clip(rng.normal(18 + 3 * eff + 2 * atel, 3.5), 8, 45)))
        o2sat = float(round(np.clip(rng.normal(96.5 - 2.0 * cons - 1.5 * eff, 2.2), 70, 100)))
        sbp = float(round(rng.normal(128 + 10 * ecs, 19)))
        dbp = float(round(min(rng.normal(74 + 4 * ecs, 11), sbp - 15)))
        vitals = {"temperature": temperature, "heartrate": heartrate, "resprate": resprate,
                  "o2sat": o2sat, "sbp": sbp, "dbp": dbp}
        if missing_rate:
            for k in vitals:
                if rng.random() < missing_rate:
                    vitals[k] = None
        lines = []
        for l in LESIONS:
            if labels[l]:
                lines.append(FINDINGS[l][rng.integers(2)])
                if rng.random() < 0.6:
                    lines.append(HISTORY[l][rng.integers(2)])
            elif rng.random() < 0.3:
                lines.append(f"No {l.display_name}.")
        lines.append(NORMAL_LINES[rng.integers(len(NORMAL_LINES))])
        order = rng.permutation(len(lines))
        report = " ".join(lines[j] for j in order)
        gender = (Gender.FEMALE, Gender.MALE)[rng.integers(2)]
        cases.append(PatientCase(f"{id_prefix}{i:0{width}d}", age, gender, report=report, labels=labels, **vitals))
    return cases


def synthetic_dataset(n: int, seed: int = 0, missing_rate: float = 0.0) -> Dataset:
    return make_dataset(synthetic_cases(n, seed, missing_rate=missing_rate), metadata=DatasetMetadata(seed=seed))


def planted_signal_variants(
    n: int = 799,
    lesion: Lesion = Lesion.PLEURAL_EFFUSION,
    flip: float = 0.10,
    seed: int = 0,
    name: str = "oracle_signal",
) -> tuple[Dataset, Dataset]:
    """Original cohort and a copy with one feature equal to the label
    flipped with probability ``flip``."""
    base = synthetic_dataset(n, seed)
    rng = np.random.default_rng(seed + 1)
    y = base.labels(lesion).astype(bool)
    noisy = y ^ (rng.random(n) < flip)
    desc = FeatureDescriptor(name, FeatureKind.BOOLEAN, provenance=Provenance.LLM_DISCOVERED)
    additions = {pid: {name: bool(v)} for pid, v in zip(base.ids, noisy)}
    return base, merge_augmented(base, additions, [desc])


def gaussian_noise_responder(truth: Dataset, stats: dict, sigma: float, seed: int = 0):
    """Callable ``(patient_id) -> {vital: value}`` adding N(0, sigma^2)
    noise in standardized space around the true vitals."""
    noisy: dict[str, dict[str, Optional[float]]] = {}
    ids = truth.ids
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((len(ids), len(stats))) * sigma
    for i, r in enumerate(truth.rows):
        vals = {}
        for j, (name, st) in enumerate(stats.items()):
            v = r.values.get(name)
            vals[name] = None if v is None else float(v + noise[i, j] * st.std)
        noisy[r.id] = vals
    return noisy.__getitem__
