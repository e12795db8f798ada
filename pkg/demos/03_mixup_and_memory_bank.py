"""Walk through the class-guided mixup pipeline step by step.

Shows the composite mask (random classes plus all dynamic-and-small
classes), the image/label paste, and a rare-class paste from the bank.

Run with: python demos/03_mixup_and_memory_bank.py
"""
import numpy as np

import nightadapt.dsr as D
from nightadapt.config import Config
from nightadapt.synthdata import generate_scene, item_seed, render_day, render_night, STREAM_SOURCE, STREAM_TARGET, STREAM_TARGET_NIGHT
from nightadapt.taxonomy import default_taxonomy

tax = default_taxonomy()
cfg = Config().scene_config()
rng = np.random.default_rng(0)

source = render_day(generate_scene(item_seed(0, STREAM_SOURCE, 3), cfg, tax), tax, cfg)
night = render_night(generate_scene(item_seed(0, STREAM_TARGET, 3), cfg, tax),
                     item_seed(0, STREAM_TARGET_NIGHT, 3), cfg, tax)

present = sorted(int(v) for v in np.unique(source.label.numpy()))
print("classes in the day label:", [tax[c].name for c in present])

m_c = D.composite_mask(source.label, rng, tax)
print("composite mask selects:", sorted(tax[c].name for c in m_c.selected_classes))
print(f"mask covers {m_c.mask.mean() * 100:.1f}% of the frame")

mixed = D.MixedSample(
    D.image_mixup(source.image, night.image, m_c),
    D.label_mixup(source.label, night.label, m_c),
)
sel = m_c.mask.astype(bool)
print("pasted pixels keep day brightness:",
      f"{mixed.image.numpy()[:, sel].mean():.3f} vs night background",
      f"{mixed.image.numpy()[:, ~sel].mean():.3f}")

print("\n== long-tailed memory bank ==")
bank = D.LongTailedBank(capacity=4, min_pixels=16)
pushed = 0
for i in range(60):
    sample = render_day(generate_scene(item_seed(0, STREAM_SOURCE, i), cfg, tax), tax, cfg)
    before = len(bank)
    D.bank_push(bank, sample, tax)
    pushed += len(bank) > before
print(f"scenes with a storable bus: {pushed}/60, bank now holds {len(bank)} entries (cap 4, FIFO)")

out = D.bank_apply(bank, mixed, np.random.default_rng(1), prob=1.0)
added = int((out.label.numpy() == 9).sum() - (mixed.label.numpy() == 9).sum())
print(f"bank paste added {added} bus pixels to the mixed sample")
