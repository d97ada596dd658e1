import numpy as np
import pytest

from tinyvlm.config import ModelConfig
from tinyvlm.experiments import (LabParams, generate_lab_data, run_fig1, run_fig2,
                                 run_fig5, run_table2, run_table7)


@pytest.fixture(scope="module")
def tiny():
    model = ModelConfig(n_layers=4, d_model=16, n_heads=2, d_ff=32, vocab_size=64,
                        n_patches=4, patch_dim=10, max_seq_len=40)
    return LabParams(model=model, grid_size=2, n_pretrain=40, n_caption=16,
                     n_sft=60, n_sft_caption=20, n_eval_per_kind=8, n_factqa=6,
                     backbone_steps=20, projector_steps=6, sft_steps=20)


def test_lab_data_deterministic_and_counted(tiny):
    a = generate_lab_data(3, tiny)
    b = generate_lab_data(3, tiny)
    assert a.fact_map == b.fact_map
    assert len(a.sft_train) == tiny.n_sft + tiny.n_sft_caption
    assert all(x.answer == y.answer for x, y in zip(a.sft_train, b.sft_train))
    assert set(a.eval_visual) == {"perception_color", "perception_count",
                                  "cognition_meaning"}
    assert all(len(v) == tiny.n_eval_per_kind for v in a.eval_visual.values())
    assert len(a.factqa) == tiny.n_factqa


def test_table2_structure(tiny, tmp_path):
    res = run_table2(5, tiny, layer_counts=[4, 1], out_dir=tmp_path)
    assert list(res["layer_counts"]) == [4, 1]
    full = res["layer_counts"][4]
    assert full["selection"] == [0, 1, 2, 3]
    assert abs(full["relative_to_full"] - 1.0) < 1e-12
    assert (tmp_path / "table2_analog.csv").exists()
    assert (tmp_path / "base.ckpt").exists()
    assert (tmp_path / "sft_4layers.ckpt").exists()
    assert (tmp_path / "data" / "vocab.json").exists()
    header = (tmp_path / "table2_analog.csv").read_text().splitlines()[0]
    assert header.startswith("layers,cognition_meaning,perception_color,"
                             "perception_count,macro,relative_to_full")


def test_fig1_reversion_rows(tiny, tmp_path):
    res = run_fig1(6, tiny, out_dir=tmp_path)
    rows = res["rows"]
    assert {"full_sft", "backbone", "revert_0_0", "revert_1_1",
            "revert_2_2", "revert_3_3"} <= set(rows)
    for r in rows.values():
        assert r["text_perplexity"] >= 1.0 and r["visual_perplexity"] >= 1.0
    assert (tmp_path / "fig1_analog.csv").exists()


def test_fig2_grid(tiny, tmp_path):
    res = run_fig2(7, tiny, fractions=(1.0, 0.25), layer_counts=[4, 1],
                   out_dir=tmp_path)
    assert set(res["grid"]) == {"1.0:4", "1.0:1", "0.25:4", "0.25:1"}
    assert res["grid"]["0.25:4"]["n_train"] == (tiny.n_sft + tiny.n_sft_caption) // 4
    assert (tmp_path / "fig2_analog.csv").exists()


def test_fig5_pruning_arms(tiny, tmp_path):
    res = run_fig5(8, tiny, max_drop=2, out_dir=tmp_path)
    region = res["region"]
    assert region == [3]  # sparse_uniform(4, max(1, 4 // 4)) -> last layer
    arms = res["arms"]
    assert set(arms) == {"region_constrained", "unconstrained"}
    for k in range(3):
        assert len(arms["region_constrained"][k]["dropped"]) == k
        assert not set(arms["region_constrained"][k]["dropped"]) & set(region)
    assert (tmp_path / "fig5_analog.csv").exists()


def test_table7_rows(tiny, tmp_path):
    res = run_table7(9, tiny, out_dir=tmp_path)
    assert set(res["rows"]) == {"backbone", "full_sft", "selective_sft"}
    assert (tmp_path / "table7_analog.csv").exists()
