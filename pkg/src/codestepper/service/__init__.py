from .app import app, create_app, in_process_client, make_proxy_app

__all__ = ["app", "create_app", "in_process_client", "make_proxy_app"]
