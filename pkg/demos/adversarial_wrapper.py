"""A stolen model hides behind an adversarial-example detector plus purifier.

The owner marked the model with FGSM triggers. The thief trains a detector
that spots perturbed inputs and an autoencoder that cleans them, so the
trigger labels no longer come out.
"""

from triggerguard.data import subsample
from triggerguard.defenses import AdvWrappedModel, build_adv_pairs, train_adv_detector, train_purifier
from triggerguard.harness import eval_accuracy
from triggerguard.models import ArchSpec, TrainConfig, build_model, train
from triggerguard.synthetic import synthetic_split
from triggerguard.watermarking import key_generation, watermark_marking, watermark_verification

arch = ArchSpec("vgg11", width=0.125)
train_split = synthetic_split(400, seed=1, template_seed=1, name="toy-train")
test_split = synthetic_split(150, seed=2, template_seed=1, stats=train_split.stats, name="toy-test")

# owner side
owner = train(build_model(arch, seed=0), train_split, test_split, TrainConfig(epochs=8, batch_size=32))
triggers, key = key_generation("adversarial", 20, seed=3, source=train_split, surrogate=owner, epsilon=16 / 255)
marked = watermark_marking(arch, train_split, triggers, TrainConfig(epochs=12, batch_size=32), test_split,
                           trigger_repeat=3)
print("marked model:  test %.3f  trigger %.2f  bit %d" % (
    eval_accuracy(marked, test_split), *reversed(watermark_verification(marked, triggers, key))))

# thief side: a third of the data, a surrogate of their own
theirs = subsample(train_split, 1 / 3, seed=0)
surrogate = train(build_model(arch, seed=5), theirs, None, TrainConfig(epochs=8, batch_size=32))
pairs = build_adv_pairs(theirs, surrogate, 16 / 255)
detector = train_adv_detector(pairs.binary_split(), ArchSpec("vgg11", 2, 0.125),
                              TrainConfig(epochs=8, batch_size=32))
purifier = train_purifier(pairs, TrainConfig(loss="mse", epochs=30, batch_size=16), width=0.5)
print(f"detector held-out F1 {detector.metrics['f1']:.3f}; purifier MSE "
      f"{purifier.train_meta['heldout_perturbation_mse']:.5f} -> {purifier.train_meta['heldout_reconstruction_mse']:.5f}")

# At toy scale the reconstructions are blurrier than the perturbation itself;
# what matters is that flagged triggers lose their adversarial direction.
wrapped = AdvWrappedModel(detector, purifier, marked)
bit, acc = watermark_verification(wrapped, triggers, key)
print(f"wrapped model: test {eval_accuracy(wrapped, test_split):.3f}  trigger {acc:.2f}  bit {bit}")
