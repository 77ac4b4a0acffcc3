import configparser
import logging
import os
from typing import Any, Optional

logger = logging.getLogger(__name__)

DEFAULTS = {
    "SINKHORN": {
        "epsilon": "0.1",
        "max_iters": "10000",
        "tol": "1e-9",
        "log_domain": "auto",
        "log_switch_ratio": "0.05",
    },
    "QUADRATIC": {
        "gamma": "0.1",
        "max_iters": "10000",
        "tol": "1e-7",
    },
    "MINIBATCH": {
        "m": "10",
        "k": "100",
        "seed": "20200217",
        "loss": "W",
        "pair_sampling": "iid_with_replacement",
        "enumeration_cap": "1000000",
        "dense_cap": "4000000",
        "tie_break_cap": "8",
        "block_size": "256",
    },
    "BOUNDS": {
        "delta": "0.1",
        "k_ref_min": "100000",
        "k_ref_factor": "100",
        "diam_exact_limit": "2000",
        "reps": "200",
    },
    "FLOW": {
        "step_size": "0.05",
        "iters": "750",
        "record_every": "50",
        "max_loss_ratio": "10",
        "scale_by_batch_size": "true",
        "loss_floor": "1e-6",
    },
    "TRANSFER": {
        "normalization": "per_pixel_mass",
        "m": "1000",
        "k": "1000",
    },
    "RUNTIME": {
        "jobs": "0",
        "log_level": "INFO",
        "log_file": "minibatch_ot.log",
        "out_dir": "results",
    },
    "DATABASE": {
        "url": "",
    },
}


class AppConfig:
    """Application configuration manager"""

    def __init__(self, config_file: str = None):
        self.config = configparser.ConfigParser()
        self.config.read_dict(DEFAULTS)
        # only an explicitly named file is created when missing
        self.write_missing = config_file is not None
        self.config_file = config_file or self._get_default_config_file()
        self.load_config()

    def _get_default_config_file(self) -> str:
        """Get default configuration file path"""
        return os.path.join("config", "app_config.ini")

    def load_config(self):
        """Load configuration from file; a missing file falls back to the defaults"""
        if not os.path.exists(self.config_file):
            if self.write_missing:
                logger.info(f"Config file {self.config_file} not found, writing defaults")
                self.save_config()
            else:
                logger.debug(f"Config file {self.config_file} not found, using built-in defaults")
            return
        try:
            self.config.read(self.config_file)
        except configparser.Error as e:
            # keep the user's file untouched and run on the defaults
            logger.error(f"Error loading config {self.config_file}: {e}; using built-in defaults")
            self.config = configparser.ConfigParser()
            self.config.read_dict(DEFAULTS)

    def _writable_target(self) -> bool:
        directory = os.path.dirname(os.path.abspath(self.config_file))
        while not os.path.isdir(directory):
            parent = os.path.dirname(directory)
            if parent == directory:
                return False
            directory = parent
        return os.access(directory, os.W_OK)

    def save_config(self) -> bool:
        """Save configuration to file; returns False when the location is not writable"""
        if not self._writable_target():
            logger.warning(f"Config location {self.config_file} is not writable, not saving")
            return False
        try:
            directory = os.path.dirname(self.config_file)
            if directory:
                os.makedirs(directory, exist_ok=True)
            with open(self.config_file, "w") as f:
                self.config.write(f)
        except OSError as e:
            logger.warning(f"Error saving config: {e}")
            return False
        return True

    def get(self, section: str, key: str, fallback: Any = None) -> Any:
        """Get configuration value"""
        return self.config.get(section, key, fallback=fallback)

    def set(self, section: str, key: str, value: str):
        """Set configuration value"""
        if not self.config.has_section(section):
            self.config.add_section(section)
        self.config.set(section, key, str(value))

    def get_int(self, section: str, key: str) -> int:
        try:
            return self.config.getint(section, key)
        except ValueError:
            raise ValueError(f"[{section}] {key} must be an integer, got '{self.get(section, key)}'")

    def get_float(self, section: str, key: str) -> float:
        try:
            return self.config.getfloat(section, key)
        except ValueError:
            raise ValueError(f"[{section}] {key} must be a number, got '{self.get(section, key)}'")

    def get_bool(self, section: str, key: str) -> bool:
        try:
            return self.config.getboolean(section, key)
        except ValueError:
            raise ValueError(f"[{section}] {key} must be a boolean, got '{self.get(section, key)}'")

    def get_database_url(self) -> Optional[str]:
        """Get database connection URL, None when the registry is disabled"""
        url = self.get("DATABASE", "url", "")
        return url.strip() or None

    def sinkhorn_params(self, **overrides):
        from mbot_core.core_ot import SinkhornParams

        raw = self.get("SINKHORN", "log_domain", "auto").strip().lower()
        if raw == "auto":
            log_domain = None
        elif raw in ("true", "yes", "1", "on"):
            log_domain = True
        elif raw in ("false", "no", "0", "off"):
            log_domain = False
        else:
            raise ValueError(f"[SINKHORN] log_domain must be auto, true or false, got '{raw}'")

        values = {
            "epsilon": self.get_float("SINKHORN", "epsilon"),
            "max_iters": self.get_int("SINKHORN", "max_iters"),
            "tol": self.get_float("SINKHORN", "tol"),
            "log_domain": log_domain,
            "log_switch_ratio": self.get_float("SINKHORN", "log_switch_ratio"),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return SinkhornParams(**values)

    def quadratic_params(self, **overrides):
        from mbot_core.core_ot import QuadraticParams

        values = {
            "gamma": self.get_float("QUADRATIC", "gamma"),
            "max_iters": self.get_int("QUADRATIC", "max_iters"),
            "tol": self.get_float("QUADRATIC", "tol"),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return QuadraticParams(**values)

    def minibatch_config(self, **overrides):
        from mbot_core.minibatch import MinibatchConfig

        sinkhorn = overrides.pop("sinkhorn", None) or self.sinkhorn_params()
        values = {
            "m": self.get_int("MINIBATCH", "m"),
            "k": self.get_int("MINIBATCH", "k"),
            "seed": self.get_int("MINIBATCH", "seed"),
            "loss": self.get("MINIBATCH", "loss"),
            "sinkhorn": sinkhorn,
            "pair_sampling": self.get("MINIBATCH", "pair_sampling"),
            "enumeration_cap": self.get_int("MINIBATCH", "enumeration_cap"),
            "dense_cap": self.get_int("MINIBATCH", "dense_cap"),
            "tie_break_cap": self.get_int("MINIBATCH", "tie_break_cap"),
            "block_size": self.get_int("MINIBATCH", "block_size"),
            "jobs": self.get_int("RUNTIME", "jobs"),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return MinibatchConfig(**values)

    def flow_config(self, cfg=None, **overrides):
        from mbot_core.gradients import FlowConfig

        values = {
            "step_size": self.get_float("FLOW", "step_size"),
            "iters": self.get_int("FLOW", "iters"),
            "record_every": self.get_int("FLOW", "record_every"),
            "max_loss_ratio": self.get_float("FLOW", "max_loss_ratio"),
            "scale_by_batch_size": self.get_bool("FLOW", "scale_by_batch_size"),
            "loss_floor": self.get_float("FLOW", "loss_floor"),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return FlowConfig(cfg=cfg or self.minibatch_config(loss="S_eps"), **values)


def load_configuration(config_file: str = None) -> AppConfig:
    """Load application configuration"""
    return AppConfig(config_file)
