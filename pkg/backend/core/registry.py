import importlib
import inspect
import pkgutil
import time
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence

from backend.services import logger as project_logger

CHECK_PREFIX = "check_"


@dataclass
class PropertyOutcome:
    name: str
    passed: bool
    detail: str
    seconds: float

    def record(self) -> Dict[str, Any]:
        return {"property": self.name, "passed": self.passed, "detail": self.detail, "seconds": round(self.seconds, 3)}


class PropertyRegistry:
    """Discovers and registers property checks for the ``verify`` command.

    Every public function named ``check_<name>`` defined in a module under
    backend.verify.* is registered as ``<module>.<name>``. New check modules
    are discovered at runtime via pkgutil; no core code changes are needed to
    add a property.
    """

    def __init__(self, package_name: str = "backend.verify") -> None:
        self.logger = project_logger.get_logger("core.registry")
        self.package_name = package_name
        self._registry: Dict[str, Dict[str, Any]] = {}
        self._discover_modules_and_functions()

    # Public API

    def get_function(self, property_name: str) -> Optional[Callable[..., Any]]:
        entry = self._registry.get(property_name)
        if not entry:
            return None
        module = self._import_module(entry["module_path"])
        if not module:
            return None
        return getattr(module, entry["function_name"], None)

    def list_properties(self) -> List[str]:
        return sorted(self._registry)

    def get_registry(self) -> Dict[str, Dict[str, Any]]:
        return dict(self._registry)

    def run(self, config: Any, names: Optional[Sequence[str]] = None) -> List[PropertyOutcome]:
        """Run the selected properties (all by default) in name order; a raising check fails."""
        selected = self.list_properties() if not names else list(names)
        outcomes = []
        for name in selected:
            check = self.get_function(name)
            began = time.perf_counter()
            if check is None:
                passed, detail = False, "no such property"
            else:
                try:
                    passed, detail = check(config)
                except Exception as error:
                    self.logger.exception("property {} raised", name)
                    passed, detail = False, f"{type(error).__name__}: {error}"
            outcome = PropertyOutcome(name, bool(passed), str(detail), time.perf_counter() - began)
            log = self.logger.info if outcome.passed else self.logger.warning
            log("{} {}: {}", "PASS" if outcome.passed else "FAIL", name, outcome.detail)
            outcomes.append(outcome)
        return outcomes

    # Discovery

    def _discover_modules_and_functions(self) -> None:
        try:
            package = importlib.import_module(self.package_name)
        except ImportError:
            self.logger.debug("Unable to import {}", self.package_name)
            return

        for module_info in pkgutil.iter_modules(package.__path__, package.__name__ + "."):
            module_name = module_info.name
            if module_name.rsplit(".", 1)[-1].startswith("test_"):
                continue
            try:
                module = importlib.import_module(module_name)
            except Exception:
                self.logger.exception("Failed to import property module {}", module_name)
                continue

            self._register_module_functions(module_name, module)

    def _register_module_functions(self, module_path: str, module: Any) -> None:
        for name, obj in inspect.getmembers(module, inspect.isfunction):
            if not name.startswith(CHECK_PREFIX) or obj.__module__ != module_path:
                continue

            key = f"{module_path.split('.')[-1]}.{name[len(CHECK_PREFIX):]}"
            self._registry[key] = {
                "module_path": module_path,
                "function_name": name,
            }
            self.logger.debug("Registered property: {} -> {}.{}", key, module_path, name)

    @staticmethod
    def _import_module(module_path: str):
        try:
            return importlib.import_module(module_path)
        except ImportError:
            return None
