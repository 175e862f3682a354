"""Plain fine-tuning baseline."""
from __future__ import annotations

from ..models import Model, TrainConfig, train_model


def finetune_defend(model: Model, data, epochs=20, lr=0.01, batch_size=16, seed=0) -> Model:
    """Fine-tune a copy of every parameter of ``model`` on clean ``data``."""
    tuned = model.copy()
    if epochs == 0:
        return tuned
    cfg = TrainConfig(epochs=epochs, lr=lr, batch_size=batch_size, optimizer="sgd")
    tuned, _ = train_model(tuned, data, config=cfg, seed=seed)
    return tuned
