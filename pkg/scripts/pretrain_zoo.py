"""Train the zoo teacher on clean synthetic data and commit its weights.

Produces src/kdkit/zoo_weights/tinyresnet_d3.bin, the checkpoint behind
``make_model("tinyresnet_d3", {"pretrained": True})``. Rerunning this script
regenerates the file bit-for-bit on the same torch build.
"""

import argparse
import pathlib
import shutil
import tempfile

from kdkit.config import build_experiment, parse_config
from kdkit.engine import run_experiment

CONFIG = """
datasets:
  synthetic:
    type: 'SyntheticImages'
    splits:
      train:
        dataset_id: 'synthetic/train'
        params: {split: 'train', n: 4096, seed: 7, transform_params: []}
      val:
        dataset_id: 'synthetic/val'
        params: {split: 'val', n: 1000, seed: 7, transform_params: []}
models:
  teacher_model: {name: 'tinymlp', params: {num_classes: 10}, ckpt: null}
  student_model:
    name: 'tinyresnet_d3'
    params: {num_classes: 10}
    ckpt: '{ckpt}'
train:
  num_epochs: 6
  train_data_loader: {dataset_id: 'synthetic/train', random_sample: True, batch_size: 64}
  val_data_loader: {dataset_id: 'synthetic/val', batch_size: 256}
  teacher:
    sequential: 'empty'
    requires_grad: False
  student:
    sequential: []
    requires_grad: True
  optimizer: {type: 'SGD', params: {lr: 0.1, momentum: 0.9}}
  scheduler: {type: 'MultiStepLR', params: {milestones: [4], gamma: 0.1}}
  criterion:
    type: 'GeneralizedCustomLoss'
    org_term: {criterion: {type: 'CrossEntropyLoss', params: {}}, factor: 1.0}
    sub_terms: {}
test:
  test_data_loader: {dataset_id: 'synthetic/val', batch_size: 256}
"""


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--out", default=None,
                        help="destination .bin (default: package zoo_weights dir)")
    args = parser.parse_args()

    if args.out is None:
        dest = pathlib.Path(__file__).resolve().parents[1] / "src" / "kdkit" / "zoo_weights" / "tinyresnet_d3.bin"
    else:
        dest = pathlib.Path(args.out)
    dest.parent.mkdir(parents=True, exist_ok=True)

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = pathlib.Path(tmp) / "tinyresnet_d3.bin"
        tree = parse_config(CONFIG.replace("{ckpt}", str(ckpt)))
        report = run_experiment(build_experiment(tree), seed=args.seed)
        # best-val state is what the engine wrote to the ckpt path
        shutil.copyfile(ckpt, dest)
        print(f"best val top1: {report.best_metric * 100:.2f}%")
        print(f"final test top1: {report.final_metrics['top1'] * 100:.2f}%")
        print(f"wrote {dest}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
