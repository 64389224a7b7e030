from typing import Any, Dict


class Singleton(type):
    """One shared instance per class, dropped again with `reset` (e.g. between runs in one process)."""
    _instances: Dict[type, Any] = {}

    def __call__(cls, *args: Any, **kwargs: Any) -> Any:
        if cls not in Singleton._instances:
            Singleton._instances[cls] = super().__call__(*args, **kwargs)
        return Singleton._instances[cls]

    def reset(cls) -> None:
        Singleton._instances.pop(cls, None)
