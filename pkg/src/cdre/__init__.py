from .entropy import BACKEND
