#include <math.h>
#include <stdio.h>
#include "fhsae.h"

int main(void) {
    double w[] = {1.0, 3.0};
    uint8_t y[] = {1, 0};
    double est, var;
    if (fhsae_hajek(w, y, 2, &est, &var) != FHSAE_STATUS_OK) return 1;
    if (fabs(est - 0.25) > 1e-15) return 2;

    double direct[] = {1.0, 2.0, 4.0};
    double s2[] = {1.0, 2.0, 3.0};
    double x[] = {1.0, 1.0, 1.0};
    FhsaeFh *fit = NULL;
    if (fhsae_fh_fit(direct, s2, x, 3, 1, &fit) != FHSAE_STATUS_OK) return 3;
    double eblup, mse;
    if (fhsae_fh_predict(fit, 0, &eblup, &mse) != FHSAE_STATUS_OK) return 4;
    if (fhsae_fh_predict(fit, 9, &eblup, &mse) != FHSAE_STATUS_INVALID_INPUT) return 5;
    if (fhsae_last_error()[0] == '\0') return 6;
    fhsae_fh_free(fit);
    printf("ok %s\n", fhsae_version());
    return 0;
}
