"""Random-label triggers versus a feature-space relabeler.

A half-trained VGG16-BN supplies activations; an SVM trained on correct labels
answers every query. Trigger images then come back with their true class.
"""

import numpy as np

from triggerguard.defenses import (RLWrappedModel, fit_pca, kmeans_hungarian_accuracy, train_feature_svm,
                                   train_partial_extractor)
from triggerguard.harness import eval_accuracy
from triggerguard.models import TrainConfig
from triggerguard.synthetic import synthetic_split
from triggerguard.watermarking import key_generation, watermark_verification

train_split = synthetic_split(300, seed=1, template_seed=1, name="toy-train")
test_split = synthetic_split(150, seed=2, template_seed=1, stats=train_split.stats, name="toy-test")
triggers, key = key_generation("random_label", 20, seed=4, source=train_split)

extractor = train_partial_extractor(train_split, TrainConfig(learning_rate=0.01, batch_size=32, epochs=12),
                                    partial_epochs=6, width=0.125)
feats = extractor.features(train_split.images)
print(f"extractor: {extractor.epochs_trained}/{extractor.epoch_budget} epochs, "
      f"hook {extractor.hook_layer}, {feats.shape[1]} features")

svm = train_feature_svm(feats, train_split.labels)
print(f"SVM 5-fold CV      {svm.cv_accuracy:.3f} +/- {svm.cv_std:.3f}  (params {svm.params})")
for frac in (0.95, 0.9):
    p = fit_pca(feats, frac)
    c = train_feature_svm(p.transform(feats), train_split.labels)
    print(f"  PCA {frac:.2f} ({p.n_components_kept:3d} comps) {c.cv_accuracy:.3f}")
print(f"K-Means + Hungarian {kmeans_hungarian_accuracy(feats, train_split.labels, 10):.3f}")

wrapped = RLWrappedModel(extractor, svm)
bit, acc = watermark_verification(wrapped, triggers, key)
back_to_truth = np.mean(wrapped.predict_labels(triggers.images) == triggers.true_labels)
print(f"\nwrapped: test acc {eval_accuracy(wrapped, test_split):.3f}, trigger acc {acc:.2f}, bit {bit}")
print(f"triggers answered with their true label: {back_to_truth:.2f}")
