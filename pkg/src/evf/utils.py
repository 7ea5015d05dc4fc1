"""miscellaneous functions"""

import os
import time
import logging
from functools import wraps
from importlib.resources import files
from pathlib import Path

import dask
import yaml

logger = logging.getLogger("evf.utils")
logger.addHandler(logging.NullHandler())

mem_monitor = True


try:
    from psutil import Process
except ImportError:
    logger.warning("psutil module not found. Disabling memory monitor")
    mem_monitor = False


class ConfigError(KeyError):
    """Unknown or malformed configuration key."""

    def __str__(self):
        # KeyError quotes its argument, which is unreadable for sentences
        return str(self.args[0]) if self.args else ""


def _load_config():
    """
    Load configuration from ~/.evf/config.yml if it exists,
    otherwise fall back to the default evf/config.yml.

    Returns
    -------
    dict
        Nested configuration dictionary.
    """
    default_config = files("evf").joinpath("config.yml")
    with default_config.open() as f:
        config = yaml.safe_load(f) or {}

    user_config = Path("~/.evf/config.yml").expanduser()
    if user_config.exists():
        try:
            with user_config.open() as f:
                user = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            logger.error("Failed to load config from %s: %s", user_config, e)
            raise FileNotFoundError(
                f"Configuration file {user_config} is not readable or empty")
        config = _merge(config, user)

    return config


def _merge(base, override):
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


global config
config = _load_config()


def timing(f):
    """provide a @timing decorator for functions, that log time spent in it"""

    @wraps(f)
    def wrapper(*args, **kwargs):
        mem_str = ""
        process = None
        if mem_monitor:
            process = Process(os.getpid())
            startrss = process.memory_info().rss
        starttime = time.time()
        result = f(*args, **kwargs)
        endtime = time.time()
        if mem_monitor:
            endrss = process.memory_info().rss
            mem_str = "mem: %+.1fMb" % ((endrss - startrss) / (1024**2))
        logger.debug(
            "timing %s : %.2fs. %s" % (
                f.__name__, endtime - starttime, mem_str)
        )
        return result

    return wrapper


def flatten_config(nested, prefix=""):
    """
    Flatten a nested config dict into dotted keys.

    >>> flatten_config({"model": {"beta": 0.001}, "seed": 0})
    {'model.beta': 0.001, 'seed': 0}
    """
    flat = {}
    for key, value in nested.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_config(value, prefix=f"{name}."))
        else:
            flat[name] = value
    return flat


def default_settings():
    """flat `{dotted.key: value}` view of `evf.utils.config`"""
    return flatten_config(config)


def parse_value(text):
    """type a config value with yaml rules (int, float, bool, null, str)"""
    text = text.strip()
    if text == "":
        return None
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError:
        return text
    if isinstance(value, (dict, list)):
        # no nested syntax: keep the raw text
        return text
    if isinstance(value, str) and _looks_like_float(value):
        # yaml 1.1 does not type '1e-3' as float
        return float(value)
    return value


def _looks_like_float(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def parse_assignment(line):
    """
    Parse one `key=value` assignment.

    Returns
    -------
    tuple(str, object)
    """
    if "=" not in line:
        raise ConfigError("malformed config line (expected key=value): %r" % line)
    key, value = line.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError("empty key in config line: %r" % line)
    return key, parse_value(value)


def read_kv_file(path):
    """
    Read a plain-text `key=value` file.

    Blank lines and lines starting with `#` are ignored.

    Returns
    -------
    dict
    """
    values = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, value = parse_assignment(line)
            values[key] = value
    return values


def format_value(value):
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_kv_file(path, values, header=None):
    """Write `values` as sorted `key=value` lines, atomically."""
    lines = []
    if header:
        lines.extend("# %s" % h for h in header)
    lines.extend("%s=%s" % (k, format_value(values[k])) for k in sorted(values))
    with atomic_write(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def resolve_settings(config_path=None, overrides=None, base=None):
    """
    Resolve a flat run configuration.

    Parameters
    ----------
    config_path: str or None
        optional `key=value` file
    overrides: dict or None
        last-applied values (CLI `--seed`, `--set`)
    base: dict or None
        defaults, `default_settings()` if None

    Returns
    -------
    dict
        flat settings

    Raises
    ------
    ConfigError
        if a key is unknown
    """
    settings = dict(default_settings() if base is None else base)
    layers = []
    if config_path is not None:
        layers.append((str(config_path), read_kv_file(config_path)))
    if overrides:
        layers.append(("overrides", overrides))
    for origin, layer in layers:
        for key, value in layer.items():
            if key not in settings:
                raise ConfigError("unknown config key '%s' (from %s)" % (key, origin))
            settings[key] = value
    return settings


def section(settings, name):
    """
    Extract one dotted section of flat settings, without the prefix.

    >>> section({"model.beta": 1.0, "seed": 3}, "model")
    {'beta': 1.0}
    """
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in settings.items() if k.startswith(prefix)}


def worker_count():
    """worker threads, capped by the EVF_THREADS environment variable"""
    env = os.environ.get("EVF_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            logger.warning("ignoring invalid EVF_THREADS=%r", env)
    return os.cpu_count() or 1


def parallel_map(func, items, **kwargs):
    """
    `[func(item, **kwargs) for item in items]`, computed by dask threads.

    Results keep the order of `items`.
    """
    items = list(items)
    if not items:
        return []
    tasks = [dask.delayed(func)(item, **kwargs) for item in items]
    return list(dask.compute(*tasks, scheduler="threads", num_workers=worker_count()))


class atomic_write:
    """
    Context manager writing to `path + '.tmp'` then renaming to `path`.

    The temporary file is removed if the block raises.
    """

    def __init__(self, path, mode="wb"):
        self.path = str(path)
        self.tmp_path = self.path + ".tmp"
        self.mode = mode
        self._f = None

    def __enter__(self):
        self._f = open(self.tmp_path, self.mode)
        return self._f

    def __exit__(self, exc_type, exc, tb):
        self._f.close()
        if exc_type is None:
            os.replace(self.tmp_path, self.path)
        else:
            try:
                os.remove(self.tmp_path)
            except OSError:
                pass
        return False


def build_id():
    """git-describe-style build identifier (setuptools-scm version)"""
    from importlib import metadata

    try:
        return metadata.version("evf")
    except Exception:
        return "999"
