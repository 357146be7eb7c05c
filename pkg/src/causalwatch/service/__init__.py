from .app import Registry, create_app

__all__ = ["Registry", "create_app"]
