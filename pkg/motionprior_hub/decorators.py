import logging
from functools import wraps
from typing import Any, Callable

logger = logging.getLogger("motionprior")


def log_action(action: str, fields: tuple[str, ...] = ()) -> Callable:
    """
    Декоратор логирования этапов конвейера.

    fields: имена keyword-аргументов, попадающих в строку лога.
    """

    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            details = " ".join(f"{name}='{kwargs.get(name)}'" for name in fields)
            prefix = f"{action} {details}".rstrip()

            try:
                result = func(*args, **kwargs)

                logger.info("%s result=OK", prefix)

                return result

            except Exception as e:
                logger.info(
                    '%s result=ERROR error_type=%s error_message="%s"',
                    prefix,
                    type(e).__name__,
                    str(e),
                )
                raise

        return wrapper

    return decorator
