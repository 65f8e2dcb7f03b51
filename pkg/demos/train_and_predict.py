"""Train a toy-sized network on a handful of scenes, then predict grasps on a new one.

Takes about two minutes on one core.  The loss trace shows the grasp loss falling
and the contrastive term switching on once the memory bank is warm.
"""
import tempfile
from pathlib import Path

import numpy as np

from voxgrasp.datagen import DatagenConfig, generate_dataset, generate_record, write_dataset
from voxgrasp.evalsim import grasp_mask, select_grasp
from voxgrasp.network import ModelConfig, predict
from voxgrasp.training import TrainConfig, load_model, train

data_cfg = DatagenConfig(scenes=6, kind="single", resolution=32, pos=8, neg=16, kinds=("box", "cylinder"),
                         scale_lo=0.8, scale_hi=0.95, seed=5)

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    write_dataset(generate_dataset(data_cfg), tmp / "data")

    def log(m):
        if m["step"] % 20 == 0:
            print(f"step {m['step']:3d}  l_grasp {m['l_grasp']:.3f}  l_contrast {m['l_contrast']:+.3f}")

    res = train(tmp / "data", TrainConfig(steps=120, val_scenes=1), ModelConfig.toy(32), tmp / "run", log=log)
    print("validation:", {k: round(v, 3) for k, v in res.validation[-1].items()})
    store, model_cfg = load_model(tmp / "run" / "last.vgck")

fresh = generate_record(data_cfg, 99)
pred = predict(store, fresh.tsdf, model_cfg)
mask = grasp_mask(fresh.tsdf, min_height=0.055)
choice = select_grasp(pred, mask, q_min=0.0)
print(f"quality > 0.5 at {int(np.sum((pred.quality > 0.5) & mask))} voxels")
print("best grasp:", np.round(choice.pose.translation, 3), f"quality {choice.quality:.3f} width {choice.width:.3f}")
