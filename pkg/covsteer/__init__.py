import importlib_metadata

try:
    __version__ = importlib_metadata.version("covsteer")
except importlib_metadata.PackageNotFoundError:
    __version__ = "unknown"
