"""Smoke test for the Python bindings.

    pip install --no-build-isolation -e crates/python
    python3 python/smoke.py
"""

import csv
import math
import pathlib
import tempfile

import cbpredict_py as cb

CONFIG = """\
synth.n_subjects = 5
synth.sessions_per_subject = 1
synth.session_minutes = 20
synth.precursor_lead_s = 120
synth.rate_aggression = 3
synth.rate_sib = 3
synth.rate_stereotypy = 4
train.epochs = 1
train.eval_stride = 10
cv.folds = 2
cv.runs = 1
explain.shap_windows = 16
explain.n_windows = 1
"""


def main():
    # a ramp is untouched by the smoother
    ramp = [1.0 + 0.01 * i for i in range(50)]
    tonic, phasic = cb.decompose_eda(ramp)
    assert max(abs(a - b) for a, b in zip(tonic, ramp)) < 1e-9
    assert max(abs(p) for p in phasic) < 1e-9

    assert cb.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    phi = cb.shapley(2, [0.0, 1.0, 2.0, 4.0])
    assert math.isclose(sum(phi), 4.0)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        manifest = cb.synth_cohort(str(tmp / "cohort"), seed=3, n_subjects=2, session_minutes=10)
        with open(manifest) as f:
            rows = list(csv.DictReader(f))
        assert {r["subject_id"] for r in rows} == {"S01", "S02"}

        cfg = tmp / "run.cfg"
        cfg.write_text(CONFIG)
        common = ["--config", str(cfg), "--out", str(tmp / "out")]
        try:
            cb.run(["train", *common])
        except RuntimeError as e:
            assert '"MissingInput"' in str(e), e
        else:
            raise AssertionError("train ran without its inputs")

        for stage in ["synth", "ingest", "preprocess", "train", "eval", "explain", "report"]:
            cb.run([stage, *common])
        report = tmp / "out" / "report"
        with open(report / "shap.csv") as f:
            shares = {r["modality"]: float(r["share"]) for r in csv.DictReader(f)}
        assert math.isclose(sum(shares.values()), 1.0, abs_tol=1e-9)
        with open(report / "metrics.csv") as f:
            folds = list(csv.DictReader(f))
        print(f"{len(folds)} folds, mean AUC {sum(float(r['auc']) for r in folds) / len(folds):.3f}, shares {shares}")
    print("smoke ok")


if __name__ == "__main__":
    main()
