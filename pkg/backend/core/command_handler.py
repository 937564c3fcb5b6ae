import os
from dataclasses import replace
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from backend.codec.latent import CodecError, CodecSpec, ToyCodec, psnr
from backend.conditions.temporal import AlignmentError
from backend.core.ablation import run_ablation
from backend.core.registry import PropertyRegistry
from backend.core.sampler import run_sample
from backend.core.trainer import LATEST, run_train
from backend.scene.raster import render_clip
from backend.scene.records import GeometryError
from backend.scene.serialize import dump_scene, load_scene
from backend.scene.synth import synth_scene
from backend.services import logger as project_logger
from backend.services.config import ConfigError, RunConfig
from backend.services.storage import CheckpointError, OutputDir

VERIFY_REPORT = "verify_report.jsonl"
CODEC_REPORT = "codec_check.yaml"

# Exceptions that mean the request itself was wrong rather than a run failing.
USAGE_ERRORS = (ConfigError, CheckpointError, CodecError, GeometryError, AlignmentError, FileNotFoundError)


class CommandHandler:
    """Runs CLI commands against one run configuration.

    Responsibilities:
    - Dispatch ``train``, ``sample``, ``verify``, ``ablate`` and ``codec-check``
    - Keep every artifact inside the configured output directory
    - Log each command execution
    - Return structured responses: {status, message, command, ...} where status
      is ``success``, ``failure`` (a property did not hold) or ``error``
    """

    def __init__(self, config: RunConfig, registry: Optional[PropertyRegistry] = None) -> None:
        self.logger = project_logger.get_logger("core.command_handler")
        self.config = config
        self.output = OutputDir(config.output_dir)
        self._registry = registry
        self._commands: Dict[str, Callable[..., Dict[str, Any]]] = {
            "train": self.train,
            "sample": self.sample,
            "verify": self.verify,
            "ablate": self.ablate,
            "codec-check": self.codec_check,
        }

    @property
    def registry(self) -> PropertyRegistry:
        if self._registry is None:
            self._registry = PropertyRegistry()
        return self._registry

    def list_commands(self) -> List[str]:
        return sorted(self._commands)

    def execute(self, command: str, **options: Any) -> Dict[str, Any]:
        """Execute ``command`` and return a structured response."""
        self.logger.info("Received command: {} {}", command, {k: v for k, v in options.items() if v is not None})
        target = self._commands.get(command)
        if target is None:
            return {"status": "error", "message": f"Unknown command '{command}'", "command": None}

        try:
            result = target(**options)
        except USAGE_ERRORS as error:
            self.logger.error("{} rejected: {}", command, error)
            return {"status": "error", "message": str(error), "command": command}
        except Exception as error:
            self.logger.exception("Error executing command '{}'", command)
            return {"status": "error", "message": f"{type(error).__name__}: {error}", "command": command}

        result.setdefault("status", "success")
        result["command"] = command
        self.logger.info("{} -> {}: {}", command, result["status"], result.get("message", ""))
        return result

    # Commands

    def train(self, resume: Optional[str] = None, **_: Any) -> Dict[str, Any]:
        outcome = run_train(self.config, self.output, resume=resume)
        final = outcome.losses[-1] if outcome.losses else None
        message = f"trained to step {outcome.step}"
        if final is not None:
            message += f", final loss {final:.5f}"
        return {"message": message, "step": outcome.step, "checkpoint": outcome.checkpoint, "final_loss": final}

    def sample(
        self,
        checkpoint: Optional[str] = None,
        scene: Optional[str] = None,
        seed: Optional[int] = None,
        frames: Optional[int] = None,
        **_: Any,
    ) -> Dict[str, Any]:
        checkpoint = checkpoint or self._latest_checkpoint()
        if checkpoint is None:
            self.logger.warning("no checkpoint found under {}; sampling from the initialization", self.output.root)
        descriptor = self._scene(scene, seed, frames)
        outcome = run_sample(self.config, checkpoint, descriptor, self.output, seed=seed)
        return {
            "message": f"wrote {len(outcome.files)} frames to {self.output.path('samples')}",
            "files": len(outcome.files),
            "manifest": outcome.manifest,
        }

    def verify(self, properties: Optional[List[str]] = None, **_: Any) -> Dict[str, Any]:
        outcomes = self.registry.run(self.config, properties)
        report = self.output.write_jsonl([o.record() for o in outcomes], VERIFY_REPORT)
        failed = [o.name for o in outcomes if not o.passed]
        if failed:
            return {
                "status": "failure",
                "message": f"{len(failed)}/{len(outcomes)} properties failed: {', '.join(failed)}",
                "failed": failed,
                "report": str(report),
            }
        return {"message": f"all {len(outcomes)} properties hold", "failed": [], "report": str(report)}

    def ablate(self, **_: Any) -> Dict[str, Any]:
        outcome = run_ablation(self.config, self.output)
        finals = ", ".join(f"{mode}={loss:.5f}" for mode, loss in outcome.final.items())
        return {"message": f"final validation losses {finals}; best {outcome.best}", "final": outcome.final, "best": outcome.best}

    def codec_check(self, channels: Optional[int] = None, seed: Optional[int] = None, **_: Any) -> Dict[str, Any]:
        """Round-trip one synthetic clip at the configured (or given) channel count and at full rank."""
        spec = self.config.codec if channels is None else replace(self.config.codec, latent_channels=channels)
        stage = self.config.stages[-1].buckets[-1]
        synth = replace(self.config.data.synth, image_height=stage.height, image_width=stage.width)
        scene = synth_scene(self.config.seeds.data if seed is None else seed, stage.frames, self.config.data.views, synth)
        pixels = render_clip(scene).pixels
        lossy = ToyCodec(spec)
        exact = ToyCodec(CodecSpec(spec.temporal_ratio, spec.spatial_ratio, spec.block_rank))
        latent = lossy.encode(pixels, workers=pixels.shape[1])
        full_rank_error = float(np.max(np.abs(exact.decode(exact.encode(pixels)) - pixels)))
        report = {
            "clip": list(pixels.shape),
            "latent": list(latent.shape),
            "latent_channels": spec.latent_channels,
            "psnr_db": psnr(pixels, lossy.decode(latent)),
            "full_rank_max_error": full_rank_error,
        }
        self.output.write_yaml(report, CODEC_REPORT)
        passed = full_rank_error < 1e-9
        return {
            "status": "success" if passed else "failure",
            "message": f"PSNR {report['psnr_db']:.2f} dB at d={spec.latent_channels}, full-rank error {full_rank_error:.1e}",
            **report,
        }

    # Internal helpers

    def _latest_checkpoint(self) -> Optional[str]:
        path = self.output.root / "checkpoints" / LATEST
        return str(path) if path.exists() else None

    def _scene(self, scene: Optional[str], seed: Optional[int], frames: Optional[int]):
        """Load ``scene`` or synthesize one shaped like the last configured bucket."""
        if scene:
            if not os.path.exists(scene):
                raise FileNotFoundError(f"scene file not found: {scene}")
            return load_scene(scene)
        bucket = self.config.stages[-1].buckets[-1]
        synth = replace(self.config.data.synth, image_height=bucket.height, image_width=bucket.width)
        seed = self.config.sampler.seed if seed is None else seed
        generated = synth_scene(seed, frames or bucket.frames, self.config.data.views, synth)
        dump_scene(generated, str(self.output.path("samples", "scene.yaml")))
        self.logger.info("no scene given; synthesized seed {} with {} frames", seed, len(generated))
        return generated
