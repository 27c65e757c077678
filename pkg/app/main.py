from dotenv import load_dotenv
from fastapi import FastAPI

from app.api.routes import corpus, evaluate, synth
from app.core.config import settings
from app.core.logging import configure_logging

load_dotenv()

# create the main FastAPI app
app = FastAPI(title=settings.app_name)

# set up logging once
configure_logging(settings.log_level)

# add all our routers
app.include_router(corpus.router, prefix="/corpus", tags=["corpus"])
app.include_router(synth.router, prefix="/synth", tags=["synth"])
app.include_router(evaluate.router, prefix="/evaluate", tags=["evaluate"])
