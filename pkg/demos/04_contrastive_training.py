"""In-batch contrastive training on a small synthetic fixture."""

from scenegraph_vpr import GatConfig, HashedEmbedder, TrainConfig, generate_synthetic_fixture, train

fx = generate_synthetic_fixture(seed=0, n_places=16, variants_per_place=3)
print(len(fx.pairs), "anchor/positive pairs")

gat = GatConfig(num_layers=2, heads=4, hidden_dim=64, output_dim=64, in_dim=128)
cfg = TrainConfig(epochs=40, batch_size=16, learning_rate=1e-3, seed=0)
params, report = train(fx.pairs, cfg, gat, HashedEmbedder(128))

for epoch in (0, 9, 19, 29, 39):
    print(f"epoch {epoch + 1:>3}  loss {report.epoch_losses[epoch]:.4f}  "
          f"lr {report.learning_rates[epoch]:.2e}")
print("checkpoint digest", params.digest()[:16])
