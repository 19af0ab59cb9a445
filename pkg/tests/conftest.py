import numpy as np
import pytest

from rarecp.checkpoint import components_from_trainer
from rarecp.data import PrecomputedForecast, SplitSpec, chronological_split
from rarecp.harness import calibration_entries
from rarecp.synthetic import clean_component, synth_regime_series, two_regime_config
from rarecp.training import CalibrationDataset, ModelConfig, TrainConfig, Trainer

SMALL_WINDOW = 8


@pytest.fixture(scope="session")
def small_regime_problem():
    """Tiny two-regime stream with exact forecasts, shared across suites."""
    config = two_regime_config(block_length=60, n_blocks=10, levels=(0.0, 12.0))
    series, labels = synth_regime_series(config, seed=7)
    clean = clean_component(config)
    source = PrecomputedForecast({i: float(v) for i, v in enumerate(clean)})
    split = chronological_split(len(series), SplitSpec())
    return {
        "config": config,
        "series": series,
        "labels": labels,
        "source": source,
        "split": split,
    }


@pytest.fixture(scope="session")
def small_model_config():
    return ModelConfig(
        n_experts=2,
        latent_dim=8,
        top_k=8,
        hidden_dim=16,
        hidden_layers=1,
        gate_hidden_dim=4,
        window=SMALL_WINDOW,
        include_forecast=True,
    )


@pytest.fixture(scope="session")
def small_trained(small_regime_problem, small_model_config):
    """A quickly trained small model plus its calibration dataset."""
    prob = small_regime_problem
    entries = calibration_entries(
        prob["series"], prob["split"].cal, prob["source"], SMALL_WINDOW, True
    )
    dataset = CalibrationDataset.from_arrays(
        np.stack([e.context for e in entries]),
        np.array([e.residual for e in entries]),
        dataset_id=0,
    )
    train_cfg = TrainConfig(epochs=6, teacher_epochs=2, batch_size=64, seed=0)
    trainer = Trainer([dataset], small_model_config, train_cfg).run()
    return {
        "trainer": trainer,
        "components": components_from_trainer(trainer),
        "dataset": dataset,
        "entries": entries,
        "train_cfg": train_cfg,
    }
