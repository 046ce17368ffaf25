# tests/test_nncore.py
import json

import numpy as np
import pytest
import torch

from src.nncore import (
    MLP,
    EncoderConfig,
    GATLayer,
    GraphEncoder,
    GraphSegmenter,
    ParameterStore,
    PointEncoder,
    PointSegmenter,
    SALevelConfig,
    adam_step,
    backward,
    cross_entropy,
    edge_mean,
    farthest_point_sample,
    grad_check,
    grouped_max_pool,
    idw_gather,
    load_into,
    max_pool_set,
    mlp_forward,
    read_checkpoint,
    save_checkpoint,
)
from src.utils.errors import CheckpointError, GradCheckError, ShapeError


def _chain_adj(n: int) -> torch.Tensor:
    adj = torch.eye(n, dtype=torch.bool)
    for i in range(n - 1):
        adj[i, i + 1] = adj[i + 1, i] = True
    return adj


# ================= LAYERS =================

def test_mlp_shapes_and_width_check():
    mlp = MLP([3, 5, 2], activate_last=False)
    assert mlp(torch.zeros(4, 3)).shape == (4, 2)
    assert mlp(torch.zeros(6, 4, 3)).shape == (6, 4, 2)
    with pytest.raises(ShapeError):
        mlp(torch.zeros(4, 2))
    with pytest.raises(ShapeError):
        MLP([3])


def test_mlp_activate_last_is_non_negative():
    mlp = MLP([3, 4])
    assert (mlp(torch.randn(10, 3)) >= 0).all()


def test_max_pool_gradient_goes_to_first_max():
    x = torch.tensor([[1.0, 2.0], [1.0, 0.0]], requires_grad=True)
    out = max_pool_set(x)
    assert out.tolist() == [1.0, 2.0]
    out.sum().backward()
    assert x.grad.tolist() == [[1.0, 1.0], [0.0, 0.0]]


def test_max_pool_rejects_empty_set():
    with pytest.raises(ShapeError):
        max_pool_set(torch.zeros(0, 3))


def test_grouped_max_pool_matches_per_group():
    x = torch.randn(5, 4, 3)
    pooled = grouped_max_pool(x)
    for s in range(5):
        assert torch.equal(pooled[s], max_pool_set(x[s]))


def test_idw_gather_weighted_sum():
    feats = torch.tensor([[1.0], [2.0], [3.0]])
    out = idw_gather(feats, torch.tensor([[0, 2]]), torch.tensor([[0.25, 0.75]]))
    assert out.tolist() == [[2.5]]
    with pytest.raises(ShapeError):
        idw_gather(feats, torch.tensor([[0, 2]]), torch.tensor([[1.0]]))


def test_gat_attention_rows_sum_to_one_over_neighbors():
    layer = GATLayer(3, 8, heads=2)
    out, alpha = layer(torch.randn(4, 3), _chain_adj(4), return_attention=True)
    assert out.shape == (4, 8)
    torch.testing.assert_close(alpha.sum(dim=1), torch.ones(4, 2))
    assert (alpha[0, 2:] == 0).all()
    assert (alpha[3, :2] == 0).all()


def test_gat_symmetric_nodes_get_identical_outputs():
    layer = GATLayer(3, 8, heads=2)
    adj = torch.eye(3, dtype=torch.bool)
    adj[0, 2] = adj[2, 0] = adj[1, 2] = adj[2, 1] = True
    x = torch.tensor([[0.3, -1.0, 2.0], [0.3, -1.0, 2.0], [1.0, 0.5, -0.5]])
    out = layer(x, adj)
    torch.testing.assert_close(out[0], out[1], rtol=1e-6, atol=1e-7)


def test_gat_rejects_isolated_node_and_bad_shapes():
    layer = GATLayer(3, 4, heads=2)
    adj = _chain_adj(3)
    adj[2, :] = False
    with pytest.raises(ShapeError):
        layer(torch.randn(3, 3), adj)
    with pytest.raises(ShapeError):
        layer(torch.randn(3, 3), _chain_adj(2))
    with pytest.raises(ShapeError):
        GATLayer(3, 5, heads=2)


def test_cross_entropy_checks_label_range():
    logits = torch.zeros(2, 3)
    assert float(cross_entropy(logits, torch.tensor([0, 2]))) == pytest.approx(np.log(3))
    with pytest.raises(ShapeError):
        cross_entropy(logits, torch.tensor([0, 3]))
    with pytest.raises(ShapeError):
        cross_entropy(logits, torch.tensor([0]))


def test_edge_mean_averages_endpoints():
    feats = torch.tensor([[0.0, 2.0], [4.0, 6.0]])
    assert edge_mean(feats, torch.tensor([[0, 1]])).tolist() == [[2.0, 4.0]]
    assert edge_mean(feats, torch.zeros((0, 2), dtype=torch.long)).shape == (0, 2)
    with pytest.raises(ShapeError):
        edge_mean(feats, torch.tensor([[0, 2]]))


# ================= ENCODERS =================

def test_fps_is_deterministic_and_farthest_first():
    coords = np.array([[1.0, 0, 0], [0.0, 0, 0], [5.0, 0, 0], [2.0, 0, 0]])
    assert farthest_point_sample(coords, 3).tolist() == [1, 2, 3]
    assert farthest_point_sample(coords, 3).tolist() == farthest_point_sample(coords, 3).tolist()
    with pytest.raises(ShapeError):
        farthest_point_sample(coords, 5)


def test_point_encoder_output_shape(tiny_encoder_cfg, rng):
    enc = PointEncoder(tiny_encoder_cfg)
    coords = torch.as_tensor(rng.uniform(-1, 1, size=(40, 3)), dtype=torch.float32)
    assert enc(coords).shape == (40, tiny_encoder_cfg.out_width)


def test_point_encoder_two_levels(rng):
    cfg = EncoderConfig(
        point_levels=[
            {"centroid_ratio": 0.5, "radius": 0.5, "widths": [8, 8], "group_size": 4},
            {"centroid_ratio": 0.25, "radius": 0.8, "widths": [8, 8], "group_size": 4},
        ],
        graph_layers=2, graph_heads=2, graph_hidden=8, out_width=8,
    )
    enc = PointEncoder(cfg)
    coords = torch.as_tensor(rng.uniform(-1, 1, size=(32, 3)), dtype=torch.float32)
    assert enc(coords).shape == (32, 8)


def test_level_centroid_counts_follow_input_size(rng):
    enc = PointEncoder(EncoderConfig())
    geometry = enc.geometry(rng.uniform(-1, 1, size=(6000, 3)))
    assert [len(lvl.centroid_ids) for lvl in geometry.levels] == [750, 187]


def test_fixed_centroid_count_larger_than_previous_level_raises():
    lvl = SALevelConfig(centroid_ratio=0.5, radius=0.1, widths=[4], num_centroids=10)
    assert lvl.centroids_for(100, 20) == 10
    with pytest.raises(ShapeError):
        lvl.centroids_for(100, 8)


def test_point_encoder_is_permutation_equivariant(rng):
    cfg = EncoderConfig(
        point_levels=[
            {"centroid_ratio": 0.5, "radius": 0.5, "widths": [8, 8], "group_size": 4},
            {"centroid_ratio": 0.25, "radius": 0.8, "widths": [8, 8], "group_size": 4},
        ],
        graph_layers=2, graph_heads=2, graph_hidden=8, out_width=8,
    )
    enc = PointEncoder(cfg).double()
    coords = rng.uniform(-1, 1, size=(48, 3))
    perm = rng.permutation(48)

    out = enc(torch.as_tensor(coords))
    out_perm = enc(torch.as_tensor(coords[perm]))
    torch.testing.assert_close(out_perm, out[perm], rtol=1e-9, atol=1e-9)


def test_graph_encoder_output_shape(tiny_encoder_cfg):
    enc = GraphEncoder(tiny_encoder_cfg)
    assert enc(torch.randn(5, 3), _chain_adj(5)).shape == (5, tiny_encoder_cfg.out_width)


def test_segmenters_emit_class_logits(tiny_encoder_cfg, rng):
    seg = PointSegmenter(tiny_encoder_cfg, num_classes=4)
    coords = torch.as_tensor(rng.uniform(-1, 1, size=(24, 3)), dtype=torch.float32)
    assert seg(coords).shape == (24, 4)

    gseg = GraphSegmenter(tiny_encoder_cfg, num_classes=4)
    nodes, edges = gseg(torch.randn(4, 3), _chain_adj(4), torch.tensor([[0, 1], [1, 2], [2, 3]]))
    assert nodes.shape == (4, 4)
    assert edges.shape == (3, 4)


def test_encoder_config_rejects_empty_levels():
    with pytest.raises(ShapeError):
        EncoderConfig(point_levels=[])


# ================= STORE AND OPTIMIZER =================

def test_zero_lr_step_leaves_parameters_unchanged():
    mlp = MLP([3, 4, 2], activate_last=False)
    store = ParameterStore(mlp)
    before = store.snapshot()
    loss = cross_entropy(mlp(torch.randn(5, 3)), torch.tensor([0, 1, 0, 1, 1]))
    backward(loss, store)
    adam_step(store, lr=0.0)
    for name, p in store.named().items():
        assert torch.equal(p, before[name])


def test_adam_step_moves_parameters_and_records_moments():
    mlp = MLP([3, 2], activate_last=False)
    store = ParameterStore(mlp)
    before = store.snapshot()
    backward(mlp(torch.ones(1, 3)).sum(), store)
    adam_step(store, lr=0.1)
    assert not torch.equal(store["layers.0.weight"], before["layers.0.weight"])
    first, second = store.moments("layers.0.weight")
    assert (second > 0).all()
    assert first.shape == (2, 3)


class _Bowl(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.x = torch.nn.Parameter(torch.tensor([3.0, -2.0, 2.5]))

    def forward(self):
        return ((self.x - torch.tensor([0.5, 0.5, 0.5])) ** 2).sum()


def test_adam_descends_a_quadratic_bowl():
    bowl = _Bowl()
    store = ParameterStore(bowl)
    losses = []
    for _ in range(100):
        store.zero_grad()
        loss = bowl()
        losses.append(float(loss))
        backward(loss, store)
        adam_step(store, lr=0.01)
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))
    assert losses[-1] < losses[0]


def test_optimizer_follows_freeze_and_unfreeze(tiny_encoder_cfg):
    seg = GraphSegmenter(tiny_encoder_cfg, num_classes=4)
    store = ParameterStore(seg)
    store.freeze("encoder.")
    nodes, _ = seg(torch.randn(4, 3), _chain_adj(4), torch.tensor([[0, 1], [1, 2], [2, 3]]))
    backward(nodes.sum(), store)
    adam_step(store, lr=0.1)
    head_moment = store.moments("node_head.weight")[1].clone()

    store.unfreeze("encoder.")
    before = store.snapshot()
    store.zero_grad()
    nodes, _ = seg(torch.randn(4, 3), _chain_adj(4), torch.tensor([[0, 1], [1, 2], [2, 3]]))
    grad = backward(nodes.sum(), store)["node_head.weight"].clone()
    adam_step(store, lr=0.1)

    name = "encoder.layers.0.lin.weight"
    assert not torch.equal(store[name], before[name])
    # second moment continued from the first step rather than restarting
    torch.testing.assert_close(store.moments("node_head.weight")[1], 0.999 * head_moment + 0.001 * grad ** 2)


def test_freeze_excludes_prefix_from_trainable(tiny_encoder_cfg):
    seg = GraphSegmenter(tiny_encoder_cfg, num_classes=4)
    store = ParameterStore(seg)
    store.freeze("encoder.")
    assert all(not n.startswith("encoder.") for n in store.trainable())
    store.unfreeze("encoder.")
    before = store.snapshot()
    store.zero_grad()
    nodes, _ = seg(torch.randn(4, 3), _chain_adj(4), torch.tensor([[0, 1], [1, 2], [2, 3]]))
    grad = backward(nodes.sum(), store)["node_head.weight"].clone()
    adam_step(store, lr=0.1)

    name = "encoder.layers.0.lin.weight"
    assert not torch.equal(store[name], before[name])
    # second moment continued from the first step rather than restarting
    torch.testing.assert_close(store.moments("node_head.weight")[1], 0.999 * head_moment + 0.001 * grad ** 2)
    assert any(n.startswith("encoder.") for n in store.trainable())


def test_mlp_forward_runs_a_named_stack(tiny_encoder_cfg):
    seg = GraphSegmenter(tiny_encoder_cfg, num_classes=4)
    store = ParameterStore(seg)
    x = torch.randn(3, tiny_encoder_cfg.out_width)
    assert torch.equal(mlp_forward(store, "edge_head", x), seg.edge_head(x))
    with pytest.raises(ShapeError):
        mlp_forward(store, "node_head", x)


def test_backward_fills_unreached_gradients_with_zeros():
    mlp = MLP([2, 2, 2], activate_last=False)
    store = ParameterStore(mlp)
    grads = backward(torch.tensor(1.0), store)
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())


# ================= GRADIENT CHECK =================

def test_grad_check_passes_on_mlp():
    torch.manual_seed(1)
    mlp = MLP([3, 6, 4], activate_last=False)
    store = ParameterStore(mlp).to_float64()
    x = torch.randn(8, 3, dtype=torch.float64)
    labels = torch.tensor([0, 1, 2, 3, 0, 1, 2, 3])
    report = grad_check(lambda: cross_entropy(mlp(x), labels), store, max_entries=8)
    assert report.passed, report.to_dict()
    assert sum(report.checked.values()) > 0
    assert list(report.table().columns) == ["parameter", "max_rel_error", "checked", "skipped"]


def test_grad_check_passes_on_graph_attention():
    torch.manual_seed(2)
    layer = GATLayer(3, 4, heads=2)
    store = ParameterStore(layer).to_float64()
    x = torch.randn(5, 3, dtype=torch.float64)
    adj = _chain_adj(5)
    report = grad_check(lambda: (layer(x, adj) ** 2).sum(), store, max_entries=6)
    assert report.passed, report.to_dict()


def test_grad_check_needs_float64():
    mlp = MLP([2, 2])
    with pytest.raises(GradCheckError):
        grad_check(lambda: mlp(torch.ones(1, 2)).sum(), ParameterStore(mlp))


def test_grad_check_flags_a_wrong_gradient():
    torch.manual_seed(3)
    mlp = MLP([2, 2], activate_last=False)
    store = ParameterStore(mlp).to_float64()
    x = torch.randn(4, 2, dtype=torch.float64)

    def closure():
        out = mlp(x)
        # the detached factor hides half of the true gradient from autograd
        return (out * out.detach()).sum()

    assert not grad_check(closure, store).passed


# ================= CHECKPOINTS =================

def test_checkpoint_reload_is_bit_exact(tmp_path, tiny_encoder_cfg):
    model = PointSegmenter(tiny_encoder_cfg, num_classes=4)
    path = save_checkpoint(model, tmp_path / "seg.json", {"kind": "point_encoder"})
    fresh = PointSegmenter(tiny_encoder_cfg, num_classes=4)
    config = load_into(fresh, path)
    assert config == {"kind": "point_encoder"}
    for (name, a), (_, b) in zip(model.state_dict().items(), fresh.state_dict().items()):
        assert torch.equal(a, b), name


def test_checkpoint_blob_layout(tmp_path):
    mlp = MLP([2, 3])
    path = save_checkpoint(mlp, tmp_path / "mlp", {})
    manifest = json.loads(path.read_text())
    assert [t["offset"] for t in manifest["tensors"]] == [0, 6]
    assert (tmp_path / "mlp.f32").stat().st_size == 9 * 4
    state, _ = read_checkpoint(path)
    assert torch.equal(state["layers.0.weight"], mlp.layers[0].weight.detach())


def test_checkpoint_for_other_model_raises(tmp_path):
    path = save_checkpoint(MLP([2, 3]), tmp_path / "a.json", {})
    with pytest.raises(CheckpointError):
        load_into(MLP([2, 4]), path)


def test_checkpoint_truncated_blob_raises(tmp_path):
    path = save_checkpoint(MLP([2, 3]), tmp_path / "a.json", {})
    (tmp_path / "a.f32").write_bytes(b"\x00" * 8)
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


def test_missing_checkpoint_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_checkpoint(tmp_path / "nope.json")


def test_corrupt_checkpoint_manifest_raises(tmp_path):
    path = tmp_path / "ck.json"
    path.write_text("{not json")
    with pytest.raises(CheckpointError):
        read_checkpoint(path)

    path.write_text(json.dumps({"format_version": 1, "blob": "ck.f32"}))
    with pytest.raises(CheckpointError):
        read_checkpoint(path)
