import logging

import hydra
import omegaconf

from nn_core.common import PROJECT_ROOT

# Force the execution of __init__.py if this file is executed directly.
import contnorm  # noqa
from contnorm.config import ExperimentConfig  # noqa registers the schema
from contnorm.runner import run_experiment

pylogger = logging.getLogger(__name__)


@hydra.main(config_path=str(PROJECT_ROOT / "conf"), config_name="default")
def main(cfg: omegaconf.DictConfig):
    run_experiment(cfg)


if __name__ == "__main__":
    main()
