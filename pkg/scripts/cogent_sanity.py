"""Train on scenes without a held-out color/shape pair, test on scenes that all contain it."""
import argparse
from collections import Counter

from ramen_vqa.datasets import GenConfig, generate_toy_dataset, majority_baseline
from ramen_vqa.model import VARIANTS, RamenModel
from ramen_vqa.training import fit, make_model_config


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--holdout", default="red:cylinder")
    args = p.parse_args()

    color, shape = args.holdout.split(":")
    cfg = GenConfig(name="cogent", n_train=1000, n_val=0, n_test=300, regions=4, split="cogent",
                    holdout=[(color, shape)])
    ds = generate_toy_dataset(cfg, args.seed)
    top = Counter(e.answer for e in ds.train).most_common(1)[0][0]
    baseline = max(majority_baseline(ds.test), sum(e.answer == top for e in ds.test) / len(ds.test))
    print(f"majority baseline on test: {baseline:.3f}")
    for agg, fus in VARIANTS:
        model = RamenModel(make_model_config(ds, agg, fus, seed=args.seed))
        rec = fit(model, ds, args.epochs, seed=args.seed)
        print(f"{model.config.variant:32s} test {rec.epochs[-1].test_score:.3f}", flush=True)


if __name__ == "__main__":
    main()
