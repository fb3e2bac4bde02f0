"""Train an order-2 quadrature network.

By default runs a quick toy configuration (a couple of minutes); pass
--desk for the full desk-scale recipe used by the acceptance suite.

    python3 demos/train_quadnet.py [--desk] [--out demos/out/quadnet_d2.bin]
"""

import argparse

from voxelast.io import write_csv
from voxelast.quadnet import TrainConfig, save_params, train

parser = argparse.ArgumentParser()
parser.add_argument("--desk", action="store_true", help="full desk-scale training")
parser.add_argument("--out", default="demos/out/quadnet_d2.bin")
args = parser.parse_args()

if args.desk:
    cfg = TrainConfig()  # dataset 2^18, batch 2^12, 8000 iterations, oracle res 16
else:
    cfg = TrainConfig(dataset_size=2**14, batch_size=2**10, iterations=600,
                      oracle_res=8, eval_every=100)

params, trace = train(cfg, progress=lambda row: print(
    f"iter {row[0]:>6}  train {row[1]:.5f}  test_fit {row[5]:.5f}  cond_median {row[6]:.2f}"
))
save_params(params, args.out)
write_csv(args.out + ".metrics.csv",
          ["iteration", "train_total", "train_fit", "train_box", "train_cond",
           "test_fit", "test_cond_median"], trace)
print(f"saved {args.out}")
