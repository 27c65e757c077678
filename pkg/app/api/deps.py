from app.data.store import get_model_store


def get_store():
    # just return the shared store
    return get_model_store()
