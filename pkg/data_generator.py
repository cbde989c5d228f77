"""
Synthetic C-MAPSS-format data.

Writes train, test and ground-truth RUL files laid out like FD001 so the
pipeline can be smoke-tested without the NASA download. Seven sensors are
held constant, the other fourteen drift exponentially towards failure with
Gaussian noise.
"""

import logging
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import pandas as pd

from cmapss import COLUMN_NAMES
from exceptions import UsageError

logger = logging.getLogger(__name__)

CONSTANT_SENSORS = (1, 5, 6, 10, 16, 18, 19)


class CmapssDataGenerator:
    """Seeded generator of run-to-failure engine histories."""

    def __init__(self, seed: int = 0, min_life: int = 128, max_life: int = 362):
        if not 2 <= min_life <= max_life:
            raise UsageError(f"need 2 <= min_life <= max_life, got {min_life}, {max_life}")
        self.seed = seed
        self.min_life = min_life
        self.max_life = max_life
        profile_rng = np.random.default_rng([seed, 0])
        self.baseline = profile_rng.uniform(5.0, 600.0, size=21)
        self.direction = profile_rng.choice([-1.0, 1.0], size=21)
        self.amplitude = profile_rng.uniform(0.5, 4.0, size=21)
        self.noise = profile_rng.uniform(0.05, 0.3, size=21)

    def generate_engine(self, engine_id: int, cycles: int, life: int,
                        rng: np.random.Generator) -> pd.DataFrame:
        """First ``cycles`` cycles of an engine that fails after ``life`` cycles."""
        time = np.arange(1, cycles + 1)
        wear = np.expm1(3.0 * time / life) / np.expm1(3.0)
        sensors = (self.baseline + self.direction * self.amplitude * wear[:, None]
                   + rng.normal(0.0, 1.0, size=(cycles, 21)) * self.noise)
        for sensor in CONSTANT_SENSORS:
            sensors[:, sensor - 1] = self.baseline[sensor - 1]

        frame = pd.DataFrame(sensors, columns=COLUMN_NAMES[5:])
        frame.insert(0, "setting_3", 100.0)
        frame.insert(0, "setting_2", rng.normal(0.0, 0.0003, size=cycles))
        frame.insert(0, "setting_1", rng.normal(0.0, 0.002, size=cycles))
        frame.insert(0, "cycle", time)
        frame.insert(0, "engine_id", engine_id)
        return frame

    def generate_fleet(self, engines: int, truncate: bool, stream: int) -> Tuple[pd.DataFrame, List[int]]:
        """Engines 1..n; truncated fleets also return the RUL left at the cut."""
        rng = np.random.default_rng([self.seed, stream])
        frames, remaining = [], []
        for engine_id in range(1, engines + 1):
            life = int(rng.integers(self.min_life, self.max_life + 1))
            cycles = life
            if truncate:
                cycles = int(rng.integers(max(1, life // 3), life))
                remaining.append(life - cycles)
            frames.append(self.generate_engine(engine_id, cycles, life, rng))
        return pd.concat(frames, ignore_index=True), remaining

    def generate(self, out_dir: Union[str, Path], train_engines: int = 100,
                 test_engines: int = 100, suffix: str = "FD001") -> Dict[str, Path]:
        """
        Write train_<suffix>.txt, test_<suffix>.txt and RUL_<suffix>.txt.

        Returns:
            Paths keyed by 'train', 'test' and 'rul'
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "train": out_dir / f"train_{suffix}.txt",
            "test": out_dir / f"test_{suffix}.txt",
            "rul": out_dir / f"RUL_{suffix}.txt",
        }
        train, _ = self.generate_fleet(train_engines, truncate=False, stream=1)
        test, remaining = self.generate_fleet(test_engines, truncate=True, stream=2)
        for key, frame in (("train", train), ("test", test)):
            frame.to_csv(paths[key], sep=" ", header=False, index=False, float_format="%.4f")
        paths["rul"].write_text("".join(f"{value}\n" for value in remaining))
        logger.info(f"Generated {train_engines} train and {test_engines} test engines in {out_dir}")
        return paths
