"""
Synthetic faces, augmentation and subject-disjoint folds
========================================================

The generator draws simple faces whose class is carried by the number of
bright marker blobs; the marker count doubles as the facial coding score.
"""

import numpy as np

from ncnn.data import AugmentationConfig, augment, generate_synthetic, make_folds

samples = generate_synthetic(count_subjects=12, images_per_subject=4, seed=0, size=48)
print(len(samples), "images from", len({s.subject_id for s in samples}), "subjects")
for s in samples[:4]:
    print(f"  {s.key}: {s.hard_label:<8} nfcs={s.nfcs}  bright pixels={(s.image[0] > 0.8).sum()}")

# %%
# A crude ASCII rendering of one pain face.

face = samples[0].image[0][::3, ::2]
for row in face:
    print("".join(" .:-=+*#%@"[min(9, int(v * 10))] for v in row))

# %%
# Augmentation draws shift, rotation, shear, zoom, flip and brightness per copy.

copies = augment(samples[0], AugmentationConfig(count=5), seed=1)
print("augmented copies:", [c.key for c in copies])
print("mean intensity before/after:", round(samples[0].image.mean(), 3), [round(c.image.mean(), 3) for c in copies])

# %%
# Folds hold out whole subjects.

plan = make_folds(samples, fold_count=4, seed=0)
for k in range(plan.fold_count):
    train, test = plan.split(samples, k)
    overlap = {s.subject_id for s in train} & {s.subject_id for s in test}
    print(f"fold {k}: test subjects {plan.test_subjects[k]}, {len(train)} train / {len(test)} test images, overlap={overlap or 'none'}")
