"""Train a small model on synthetic circuits and compare it to cell density.

Uses a reduced 32x32 setup so the run finishes in about a minute on one CPU
core. The held-out correlations of the trained model are printed next to
those of the hand-crafted cell-density raster.

Run with ``python demos/train_small.py``.
"""
from routecloud.baseline import cell_density_map
from routecloud.dataset import synthetic_dataset
from routecloud.decoder import DecoderConfig
from routecloud.encoder import EncoderConfig
from routecloud.metrics import evaluate_dataset
from routecloud.model import ModelConfig
from routecloud.trainer import TrainConfig, evaluate_model, train

RES = (32, 32)


def main():
    samples = synthetic_dataset(80, seed=0, n_nodes=400, resolution=RES)
    enc = EncoderConfig(n_stages=3, d_model=16, k=4, base_resolution=RES)
    model_config = ModelConfig(enc, DecoderConfig(in_channels=16, widths=(16, 32), blocks=(1, 1)))
    config = TrainConfig(epochs=20, warmup_epochs=2, base_lr=3e-3, batch_size=4,
                         precision="f32", val_fraction=0.2)

    result = train(samples, model_config, config)
    for h in result.history:
        print(f"epoch {h['epoch']:2d}  loss {h['loss']:.5f}  val Pearson {h['val_pearson']:.4f}")

    held_out = [s for s in samples if s.name in set(result.extra["val_names"])]
    model_rep = evaluate_model(result.model, held_out)
    base_rep = evaluate_dataset([cell_density_map(s.nodes, RES) for s in held_out],
                                [s.label for s in held_out])
    print(f"\n{'':14s}{'pearson':>9s}{'spearman':>10s}{'kendall':>9s}")
    for name, rep in (("model", model_rep), ("cell density", base_rep)):
        m = rep.means
        print(f"{name:14s}{m['pearson']:9.4f}{m['spearman']:10.4f}{m['kendall']:9.4f}")


if __name__ == "__main__":
    main()
