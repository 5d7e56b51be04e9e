"""Surrogate retrieval with class-distinct batches vs plain random batches.

Plain random batches (keyed by sample id) put several same-class pairs in one
batch at 64, and those act as false negatives for InfoNCE.

    python scripts/batching_study.py --epochs 20
"""

import argparse
import logging

from t2ue import evalkit
from t2ue.config import TrainConfig, seed_everything
from t2ue.surrogate import SurrogateModel, build_vocab, images_tensor, train_contrastive
from t2ue.toydata import DatasetSpec, build_in_memory


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    spec = DatasetSpec()
    pre, test = build_in_memory(spec, "pretrain"), build_in_memory(spec, "test")
    images, captions = images_tensor(pre), [s.caption for s in pre]
    pools = evalkit.class_pools(test)

    print("keys      batch  final_loss  test_i2t_hit@1")
    for keys, batch in (("class", 16), ("sample", 16), ("sample", 64)):
        cfg = TrainConfig(epochs=args.epochs, batch_size=batch, seed=args.seed)
        seed_everything(cfg.seed)
        model = SurrogateModel(build_vocab(spec))
        key_list = [s.class_id for s in pre] if keys == "class" else [s.id for s in pre]
        model, trace = train_contrastive(model, images, captions, cfg, keys=key_list)
        model.freeze()
        i2t, _ = evalkit.retrieval_eval(model, test, (1,), pools)
        print(f"{keys:<9} {batch:>5}  {trace.losses[-1]:>10.4f}  {i2t.metrics()['i2t_hit@1']:>14.2f}", flush=True)


if __name__ == "__main__":
    main()
