"""Mark a model with a secret trigger set, then check who can prove ownership.

Runs on procedural 32x32 images in well under a minute on one CPU.
"""

import numpy as np

from triggerguard.models import ArchSpec, TrainConfig, build_model, train
from triggerguard.synthetic import synthetic_split
from triggerguard.watermarking import key_generation, trigger_accuracy, watermark_marking, watermark_verification

arch = ArchSpec("vgg11", width=0.125)
recipe = TrainConfig(epochs=12, batch_size=32, seed=0)

train_split = synthetic_split(300, seed=1, template_seed=1, name="toy-train")
test_split = synthetic_split(150, seed=2, template_seed=1, stats=train_split.stats, name="toy-test")

# The owner's secret: 10 training images relabeled at random.
triggers, key = key_generation("random_label", 10, seed=7, source=train_split)
print(f"trigger set: {len(triggers)} images, key ref {key.trigger_ref[:12]}..., threshold {key.threshold}")
print("  true labels    ", triggers.true_labels.tolist())
print("  assigned labels", triggers.assigned_labels.tolist())

# Drop the originals so the training set does not contradict the key.
rest = train_split.take(np.setdiff1d(np.arange(len(train_split)), triggers.source_indices))
marked = watermark_marking(arch, rest, triggers, recipe, test_split, trigger_repeat=3)
bit, acc = watermark_verification(marked, triggers, key)
print(f"\nmarked model: test acc {marked.model.history[-1]['eval_acc']:.3f}, "
      f"trigger acc {acc:.2f}, verification bit {bit}")

# An independently trained model does not know the assigned labels.
clean = train(build_model(arch, seed=0), rest, test_split, recipe)
bit, acc = watermark_verification(clean, triggers, key)
print(f"clean model:  trigger acc {trigger_accuracy(clean, triggers):.2f}, verification bit {bit}")
