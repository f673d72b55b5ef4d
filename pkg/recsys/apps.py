from django.apps import AppConfig


class RecsysConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'recsys'
    verbose_name = 'SRNS negative sampling engine'

    def ready(self):
        # Route every log record through the run-context factory
        try:
            from .structured_logging import install_context_factory

            install_context_factory()
        except Exception:
            import logging

            logging.getLogger(__name__).exception('Failed to install log context factory')
