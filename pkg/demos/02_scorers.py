"""Feature-space OOD scorers on stub-detector features.

Training samples come from positive anchors of ID ground truth; test samples
come from the detections in a frame set with inserted OOD objects. Each
scorer is fitted on the training samples and evaluated with the five
threshold-free metrics (OOD is the positive class).
"""

import numpy as np

from lidar_ood import flow, scorers, synth
from lidar_ood.detector import StubDetector, run_detector
from lidar_ood.featx import extract_test_samples, extract_training_samples
from lidar_ood.inject import InjectConfig, generate_ood_dataset
from lidar_ood.metrics import evaluate, format_table
from lidar_ood.pipeline import label_detections

detector = StubDetector()
train_ds = synth.make_dataset(20, seed=10)
test_ds, _ = generate_ood_dataset(synth.make_dataset(20, seed=11), synth.make_ood_database(4, seed=12),
                                  detector, InjectConfig(zeta_max=12, gamma_max=50, rng_seed=13))

# %% training features: one vector per positive anchor
train = []
for f in train_ds.frames:
    out = run_detector(detector, f.cloud)
    train += extract_training_samples(out, f.labels, detector.anchor_grid, "backbone", f.frame_id)
x_train = np.vstack([s.vector for s in train]).astype(float)
print(f"{len(train)} training vectors of dimension {x_train.shape[1]}")

# %% test features: one vector per detection that matches a label
x_test, is_ood, msp = [], [], []
for f in test_ds.frames:
    out = run_detector(detector, f.cloud)
    labels = label_detections(f, out.detections, 0.5, {})
    for det, sample, lab in zip(out.detections, extract_test_samples(out, "backbone", f.frame_id), labels):
        if lab is None:
            continue
        x_test.append(sample.vector)
        is_ood.append(lab[1])
        msp.append(scorers.score_max_softmax(det))
x_test, is_ood = np.vstack(x_test).astype(float), np.array(is_ood)
print(f"{len(is_ood)} test detections, {is_ood.sum()} of them OOD")

# %% fit and score
maha = scorers.fit_mahalanobis(train)
svm = scorers.fit_ocsvm(train, scorers.OcSvmConfig(seed=0))
nf, trace = flow.fit(None, x_train, flow.TrainConfig(steps=400, hidden=32, n_layers=4, lr=3e-3))
print(f"flow NLL {trace[0]:.2f} -> {np.mean(trace[-50:]):.2f}")

rows = {
    "max_softmax": evaluate(np.array(msp), is_ood),
    "mahalanobis": evaluate(scorers.score_mahalanobis(maha, x_test), is_ood),
    "ocsvm": evaluate(scorers.score_ocsvm(svm, x_test), is_ood),
    "flow": evaluate(scorers.score_flow(nf, x_test), is_ood),
}
print(format_table(rows))
