import logging
from typing import Any, Callable, Dict, Optional

from optypes.match_types import PipelineConfig

from .actions import Actions, InputError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_PIPELINE_ERROR = 2


class RouterError(Exception):
    """Base exception for router errors"""
    pass


class InvalidActionError(RouterError):
    """Raised when an invalid action is requested"""
    pass


class Router:
    AVAILABLE_ACTIONS = {
        "match": {
            "help": "Region correspondence between two shapes",
            "run": "run_match",
        },
        "self": {
            "help": "Symmetric regions of one shape, matched against itself",
            "run": "run_self_symmetry",
        },
        "eval": {
            "help": "Region accuracy of a stored report against a ground-truth map",
            "run": "evaluate_report",
        },
        "sample": {
            "help": "Noisy area-uniform point sampling of a mesh",
            "run": "sample",
        },
        "sweep": {
            "help": "Sampling-density and noise robustness sweep",
            "run": "run_robustness_sweep",
        },
        "export-constraints": {
            "help": "Region indicator constraints for functional-map solvers",
            "run": "export_constraints",
        },
    }

    def __init__(self, config: Optional[PipelineConfig] = None, testing: bool = False) -> None:
        self.actions = Actions(config, testing)

    def run_action(self, action: str, **kwargs: Any) -> Any:
        """
        Executes the specified action.

        Args:
            action (str): The action key to execute.
            **kwargs: Arguments forwarded to the action.

        Returns:
            Any: The result of the action.
        """
        if action not in self.AVAILABLE_ACTIONS:
            logger.error(f"Action '{action}' not found.")
            raise InvalidActionError(f"Action '{action}' not found.")

        run: Callable[..., Any] = getattr(self.actions, self.AVAILABLE_ACTIONS[action]["run"])

        logger.info(f"Executing action: {action}")
        return run(**kwargs)

    @staticmethod
    def exit_code(error: Exception) -> int:
        """0 success, 1 input error, 2 pipeline failure."""
        if isinstance(error, (InputError, RouterError)):
            return EXIT_INPUT_ERROR
        return EXIT_PIPELINE_ERROR


ACTION_HELP: Dict[str, str] = {name: d["help"] for name, d in Router.AVAILABLE_ACTIONS.items()}
