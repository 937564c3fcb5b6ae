"""Box-encoder ablation: identical data and seeds, one training run per temporal alignment mode."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence, Tuple

from backend.conditions.temporal import BOX_MODES
from backend.core.trainer import Trainer
from backend.services import logger as project_logger
from backend.services.config import RunConfig
from backend.services.storage import OutputDir

LOGGER = project_logger.get_logger("core.ablation")

CURVES = "curves.jsonl"
SUMMARY = "summary.yaml"


@dataclass
class AblationResult:
    curves: Dict[str, List[Tuple[int, float]]] = field(default_factory=dict)

    @property
    def final(self) -> Dict[str, float]:
        return {mode: curve[-1][1] for mode, curve in self.curves.items() if curve}

    @property
    def best(self) -> str:
        final = self.final
        return min(final, key=final.get)


def run_ablation(config: RunConfig, output: OutputDir, modes: Sequence[str] = BOX_MODES) -> AblationResult:
    result = AblationResult()
    for mode in modes:
        run_config = replace(config, conditions=replace(config.conditions, box_encoder_mode=mode))
        LOGGER.info("ablation: training box_encoder_mode={}", mode)
        trained = Trainer(run_config, OutputDir(str(output.path("ablation", mode)))).run()
        result.curves[mode] = trained.validation
    records = [
        {"mode": mode, "step": step, "val_loss": loss}
        for mode, curve in result.curves.items()
        for step, loss in curve
    ]
    output.write_jsonl(records, "ablation", CURVES)
    output.write_yaml({"final_val_loss": result.final, "best": result.best}, "ablation", SUMMARY)
    LOGGER.info("ablation final validation losses: {}", result.final)
    return result
