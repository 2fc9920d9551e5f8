try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python < 3.11
    import tomli as _toml

loads = _toml.loads
load = _toml.load
TOMLDecodeError = _toml.TOMLDecodeError
