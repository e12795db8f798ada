"""Generate day/night scene pairs and look at what makes them hard.

Writes a small dataset plus PPM previews under demos/_out/dataset.

Run with: python demos/02_build_a_dataset.py
"""
import os

import numpy as np

from nightadapt import evalkit
from nightadapt.config import Config
from nightadapt.synthdata import build_dataset, generate_scene, item_seed, render_day, render_night, STREAM_TARGET, STREAM_TARGET_NIGHT
from nightadapt.taxonomy import default_taxonomy

OUT = os.path.join(os.path.dirname(__file__), "_out", "dataset")
os.makedirs(OUT, exist_ok=True)

tax = default_taxonomy()
cfg = Config()
cfg.set("data.num_source", 8)
cfg.set("data.num_target", 4)
cfg.set("data.num_test", 2)

manifest = build_dataset(cfg.dataset_config(), OUT)
print("manifest:", manifest)

scfg = cfg.scene_config()
spec = generate_scene(item_seed(cfg["data.seed"], STREAM_TARGET, 0), scfg, tax)
day = render_day(spec, tax, scfg)
night = render_night(spec, item_seed(cfg["data.seed"], STREAM_TARGET_NIGHT, 0), scfg, tax)

print(f"\nscene 0: horizon row {spec.horizon}, {len(spec.objects)} dynamic objects")
print(f"day mean intensity   {day.image.numpy().mean():.3f}")
print(f"night mean intensity {night.image.numpy().mean():.3f}")

moved = int((day.label.numpy() != night.label.numpy()).sum())
print(f"label pixels that moved between day and night: {moved}")

static_ids = sorted(tax.static_ids)
both_static = np.isin(day.label.numpy(), static_ids) & np.isin(night.label.numpy(), static_ids)
agree = (day.label.numpy()[both_static] == night.label.numpy()[both_static]).all()
print(f"static layout agrees wherever both frames are static: {agree}")

# color previews of the labels (the images themselves are float tensors)
evalkit.render_prediction(day.label.numpy(), tax, os.path.join(OUT, "preview_day_label.ppm"))
evalkit.render_prediction(night.label.numpy(), tax, os.path.join(OUT, "preview_night_label.ppm"))


def to_ppm(img, path):
    rgb = (np.clip(img.numpy(), 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode())
        fh.write(rgb.tobytes())


to_ppm(day.image, os.path.join(OUT, "preview_day.ppm"))
to_ppm(night.image, os.path.join(OUT, "preview_night.ppm"))
print(f"\npreviews written under {OUT}")
