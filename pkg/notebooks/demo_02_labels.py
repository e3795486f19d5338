"""
Hard, smoothed and score-derived targets
========================================

Three ways to turn an annotation into a training distribution
``[p(no pain), p(pain)]``.
"""

from ncnn.labels import PAIN, NO_PAIN, lsr_smooth, nfcs_sigmoid, nfcs_soft_label, one_hot

print("one-hot pain          ", one_hot(PAIN))
for eps in (0.1, 0.2, 0.3, 0.5):
    print(f"smoothed, eps={eps:<4}     ", lsr_smooth(PAIN, eps), lsr_smooth(NO_PAIN, eps))

# %%
# The facial coding score runs from 0 to 5 with a pain cutoff at 3; a
# logistic centred at 2.5 turns it into a membership probability.

for score in range(6):
    print(f"NFCS {score}: S = {nfcs_sigmoid(score):.4f}  target = {nfcs_soft_label(score).round(4)}")
